//! Image preprocessing and the jigsaw (patch-jumbling) augmentation.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{s, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CsawError, Result};

/// Side length of the canonical backbone input.
pub const IMAGE_SIDE: usize = 224;

/// Per-channel normalization used by CLIP-family backbones.
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// A `(3, 224, 224)` image in backbone-normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim() != (3, IMAGE_SIDE, IMAGE_SIDE) {
            return Err(CsawError::Shape(format!(
                "image tensor must be (3, {IMAGE_SIDE}, {IMAGE_SIDE}), got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CsawError::NonFinite("image tensor".into()));
        }
        Ok(ImageTensor(data))
    }

    pub fn zeros() -> Self {
        ImageTensor(Array3::zeros((3, IMAGE_SIDE, IMAGE_SIDE)))
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }
}

/// Loads an image file, resizes it bilinearly to 224x224 and normalizes it.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| CsawError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(preprocess(&img.to_rgb8()))
}

pub fn preprocess(rgb: &image::RgbImage) -> ImageTensor {
    let side = IMAGE_SIDE as u32;
    let resized = if rgb.dimensions() == (side, side) {
        rgb.clone()
    } else {
        image::imageops::resize(rgb, side, side, FilterType::Triangle)
    };
    let mut data = Array3::zeros((3, IMAGE_SIDE, IMAGE_SIDE));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] =
                (px[c] as f64 / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
        }
    }
    ImageTensor(data)
}

/// Maps a normalized `(3, H, W)` array back to 8-bit RGB, clamping to range.
pub fn to_rgb8(data: ArrayView3<'_, f64>) -> image::RgbImage {
    let (_, h, w) = data.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let v = data[[c, y as usize, x as usize]] * CLIP_STD[c] + CLIP_MEAN[c];
            *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        image::Rgb(px)
    })
}

/// A bijection on the `grid * grid` patch slots of an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPermutation {
    grid: usize,
    perm: Vec<usize>,
}

impl PatchPermutation {
    pub fn new(grid: usize, perm: Vec<usize>) -> Result<Self> {
        if grid == 0 {
            return Err(CsawError::InvalidArgument("grid must be at least 1".into()));
        }
        let n = grid * grid;
        if perm.len() != n {
            return Err(CsawError::InvalidArgument(format!(
                "permutation for grid {grid} needs {n} entries, got {}",
                perm.len()
            )));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(CsawError::InvalidArgument(format!(
                    "{perm:?} is not a bijection on 0..{n}"
                )));
            }
            seen[p] = true;
        }
        Ok(PatchPermutation { grid, perm })
    }

    pub fn identity(grid: usize) -> Self {
        PatchPermutation {
            grid,
            perm: (0..grid * grid).collect(),
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> PatchPermutation {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        PatchPermutation {
            grid: self.grid,
            perm: inv,
        }
    }

    /// `self ∘ other`: slot `i` of the result reads `other[self[i]]`.
    pub fn compose(&self, other: &PatchPermutation) -> Result<PatchPermutation> {
        if self.grid != other.grid {
            return Err(CsawError::Shape(format!(
                "cannot compose grids {} and {}",
                self.grid, other.grid
            )));
        }
        Ok(PatchPermutation {
            grid: self.grid,
            perm: self.perm.iter().map(|&p| other.perm[p]).collect(),
        })
    }
}

pub fn inverse(p: &PatchPermutation) -> PatchPermutation {
    p.inverse()
}

fn check_grid(grid: usize) -> Result<()> {
    if grid == 0 || IMAGE_SIDE % grid != 0 {
        return Err(CsawError::InvalidArgument(format!(
            "grid {grid} does not divide {IMAGE_SIDE}"
        )));
    }
    Ok(())
}

/// Draws a permutation uniformly from all `(grid²)!` orderings.
pub fn sample_permutation(grid: usize, seed: u64) -> Result<PatchPermutation> {
    check_grid(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    perm.shuffle(&mut rng);
    Ok(PatchPermutation { grid, perm })
}

/// Like [`sample_permutation`] but rejects the identity whenever a
/// non-identity ordering exists (grid > 1).
pub fn sample_non_identity_permutation(grid: usize, seed: u64) -> Result<PatchPermutation> {
    check_grid(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    loop {
        perm.shuffle(&mut rng);
        let p = PatchPermutation {
            grid,
            perm: perm.clone(),
        };
        if grid == 1 || !p.is_identity() {
            return Ok(p);
        }
    }
}

/// Rearranges the patches of a `(C, H, W)` array: output slot `i` receives
/// input patch `perm[i]`. Slots are numbered row-major.
pub fn jigsaw_array(x: ArrayView3<'_, f64>, p: &PatchPermutation) -> Result<Array3<f64>> {
    let (_, h, w) = x.dim();
    let g = p.grid;
    if h % g != 0 || w % g != 0 {
        return Err(CsawError::Shape(format!(
            "grid {g} does not tile a {h}x{w} image"
        )));
    }
    let (ph, pw) = (h / g, w / g);
    let mut out = Array3::zeros(x.raw_dim());
    for (slot, &src) in p.perm.iter().enumerate() {
        let (dr, dc) = (slot / g, slot % g);
        let (sr, sc) = (src / g, src % g);
        out.slice_mut(s![.., dr * ph..(dr + 1) * ph, dc * pw..(dc + 1) * pw])
            .assign(&x.slice(s![.., sr * ph..(sr + 1) * ph, sc * pw..(sc + 1) * pw]));
    }
    Ok(out)
}

pub fn apply_jigsaw(x: &ImageTensor, p: &PatchPermutation) -> Result<ImageTensor> {
    jigsaw_array(x.view(), p).map(ImageTensor)
}

/// Mixes several integers into one seed (splitmix64 finalizer), used to give
/// every (run seed, epoch, sample) its own RNG stream independent of which
/// worker handles it.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
