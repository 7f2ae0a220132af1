//! Dataset manifests, base/new splits, few-shot sampling and the synthetic
//! fixture dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CsawError, Result};
use crate::imageops::{derive_seed, load_image, ImageTensor};
use crate::parallel;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    /// `(relative image path, class index)`, sorted by path.
    pub samples: Vec<(String, usize)>,
    /// `(height, width)` of the first image.
    pub image_size: (u32, u32),
    /// Directory the relative paths resolve against. Not part of the
    /// serialized document.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn sample_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.samples[index].0)
    }

    pub fn label(&self, index: usize) -> usize {
        self.samples[index].1
    }

    /// Sample indices belonging to `class`, ascending.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| *c == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k < 2 {
            return Err(CsawError::InvalidArgument(format!(
                "dataset `{}` needs at least 2 classes, has {k}",
                self.name
            )));
        }
        let mut seen_class = vec![false; k];
        let mut paths = std::collections::HashSet::new();
        for (path, c) in &self.samples {
            if *c >= k {
                return Err(CsawError::UnknownClass {
                    index: *c,
                    classes: k,
                });
            }
            seen_class[*c] = true;
            if !paths.insert(path) {
                return Err(CsawError::InvalidArgument(format!("duplicate sample path {path}")));
            }
        }
        if let Some(missing) = seen_class.iter().position(|s| !s) {
            return Err(CsawError::EmptyClass(self.classes[missing].clone()));
        }
        Ok(())
    }

    /// Keeps only the named classes, re-indexed in the given order. Used for
    /// the shared-label variants of the single-source multi-target setup.
    pub fn restrict(&self, class_names: &[String]) -> Result<DatasetManifest> {
        let mut remap = vec![None; self.classes.len()];
        let mut missing = Vec::new();
        for (new, name) in class_names.iter().enumerate() {
            match self.class_index(name) {
                Some(old) => remap[old] = Some(new),
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(CsawError::ClassMismatch(format!(
                "dataset `{}` lacks {}",
                self.name,
                missing.join(", ")
            )));
        }
        let samples = self
            .samples
            .iter()
            .filter_map(|(p, c)| remap[*c].map(|n| (p.clone(), n)))
            .collect();
        let m = DatasetManifest {
            name: self.name.clone(),
            classes: class_names.to_vec(),
            samples,
            image_size: self.image_size,
            root: self.root.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| CsawError::io(path, e))
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CsawError::io(dir, e))? {
        out.push(entry.map_err(|e| CsawError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scans `<root>/<class_name>/<image files>`.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(CsawError::NoClasses(root.to_path_buf()));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    let mut image_size = None;
    for (ci, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(CsawError::EmptyClass(name));
        }
        for f in files {
            let (w, h) = image::image_dimensions(&f).map_err(|e| CsawError::Image {
                path: f.clone(),
                reason: e.to_string(),
            })?;
            image_size.get_or_insert((h, w));
            let rel = f.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            samples.push((rel, ci));
        }
        classes.push(name);
    }
    samples.sort();
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(DatasetManifest {
        name,
        classes,
        samples,
        image_size: image_size.unwrap(),
        root: root.to_path_buf(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub dataset: String,
    pub seed: u64,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub shots: BTreeMap<usize, Vec<usize>>,
}

impl SplitFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| CsawError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| CsawError::io(path, e))?;
        Self::from_json(&s)
    }

    /// All sample indices used for training, in class order.
    pub fn training_indices(&self) -> Vec<usize> {
        self.shots.values().flatten().copied().collect()
    }
}

/// Shuffles the class set with `seed` and hands the first `ceil(K/2)`
/// classes to the base group. Shot lists are left empty.
pub fn make_b2n_split(manifest: &DatasetManifest, seed: u64) -> Result<SplitFile> {
    let k = manifest.num_classes();
    if k < 2 {
        return Err(CsawError::InvalidArgument(format!(
            "base-to-new split needs at least 2 classes, `{}` has {k}",
            manifest.name
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xB2]));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_base = k.div_ceil(2);
    let mut base = order[..n_base].to_vec();
    let mut new = order[n_base..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    Ok(SplitFile {
        dataset: manifest.name.clone(),
        seed,
        base_classes: base,
        new_classes: new,
        shots: BTreeMap::new(),
    })
}

/// Split covering every class of the manifest (cross-dataset and
/// single-source multi-target training).
pub fn make_full_split(manifest: &DatasetManifest, seed: u64) -> SplitFile {
    SplitFile {
        dataset: manifest.name.clone(),
        seed,
        base_classes: (0..manifest.num_classes()).collect(),
        new_classes: Vec::new(),
        shots: BTreeMap::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotSample {
    pub shots: BTreeMap<usize, Vec<usize>>,
    /// Classes that had fewer samples than requested.
    pub warnings: Vec<String>,
}

pub fn sample_shots(
    manifest: &DatasetManifest,
    classes: &[usize],
    shots: usize,
    seed: u64,
) -> Result<ShotSample> {
    let k = manifest.num_classes();
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for &c in classes {
        if c >= k {
            return Err(CsawError::UnknownClass { index: c, classes: k });
        }
        let pool = manifest.indices_of_class(c);
        let mut picked = if pool.len() <= shots {
            if pool.len() < shots {
                let msg = format!(
                    "class `{}` has {} samples, fewer than {shots} shots; using all",
                    manifest.classes[c],
                    pool.len()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            pool
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, c as u64, 0x5407]));
            pool.choose_multiple(&mut rng, shots).copied().collect()
        };
        picked.sort_unstable();
        out.insert(c, picked);
    }
    Ok(ShotSample {
        shots: out,
        warnings,
    })
}

/// Side length of synthetic images on disk; the loader resizes them.
pub const SYNTHETIC_SIDE: u32 = 64;

/// Writes `k` classes of `per_class` PNG images under `root`. Each class has
/// its own color and stripe orientation/frequency over a shared scene tone;
/// every image gets its own phase and pixel noise.
pub fn generate_synthetic_dataset(
    root: &Path,
    k: usize,
    per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(CsawError::InvalidArgument("synthetic dataset needs K >= 2".into()));
    }
    if per_class == 0 {
        return Err(CsawError::InvalidArgument("synthetic dataset needs per_class >= 1".into()));
    }
    fs::create_dir_all(root).map_err(|e| CsawError::io(root, e))?;
    let side = SYNTHETIC_SIDE;
    for class in 0..k {
        let dir = root.join(format!("class_{class:02}"));
        fs::create_dir_all(&dir).map_err(|e| CsawError::io(&dir, e))?;
        let color = hue_to_rgb(class as f64 / k as f64);
        let freq = 2.0 + (class % 4) as f64 * 1.5;
        let angle = std::f64::consts::PI * (class as f64 * 0.618_034).fract();
        let (ca, sa) = (angle.cos(), angle.sin());
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, class as u64, i as u64]));
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let img = image::RgbImage::from_fn(side, side, |x, y| {
                let u = (x as f64 * ca + y as f64 * sa) / side as f64;
                let stripe = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).sin();
                let mut px = [0u8; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let v = 0.45 + 0.3 * color[c] + 0.15 * stripe + 0.1 * rng.random::<f64>();
                    *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                image::Rgb(px)
            });
            let path = dir.join(format!("img_{i:04}.png"));
            img.save(&path).map_err(|e| CsawError::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
    }
    load_manifest(root)
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Tensor(Arc<ImageTensor>),
}

#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub source: ImageSource,
    /// Label in the set's own (possibly remapped) class list.
    pub label: usize,
    /// Index of the sample in its manifest, when it came from one.
    pub sample: Option<usize>,
}

/// Images with labels over an ordered class list, loaded lazily.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledItem>,
}

impl LabeledSet {
    /// Samples of `classes` (manifest indices) restricted to `samples`,
    /// with labels remapped to positions in `classes`.
    pub fn from_manifest(manifest: &DatasetManifest, classes: &[usize], samples: &[usize]) -> Result<Self> {
        let k = manifest.num_classes();
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(CsawError::UnknownClass { index: bad, classes: k });
        }
        let mut items = Vec::with_capacity(samples.len());
        for &s in samples {
            if s >= manifest.samples.len() {
                return Err(CsawError::InvalidArgument(format!(
                    "sample index {s} out of range for `{}`",
                    manifest.name
                )));
            }
            let c = manifest.label(s);
            let label = classes.iter().position(|&x| x == c).ok_or_else(|| {
                CsawError::InvalidArgument(format!(
                    "sample {s} belongs to class `{}`, which is not in the requested class list",
                    manifest.classes[c]
                ))
            })?;
            items.push(LabeledItem {
                source: ImageSource::Path(manifest.sample_path(s)),
                label,
                sample: Some(s),
            });
        }
        Ok(LabeledSet {
            class_names: classes.iter().map(|&c| manifest.classes[c].clone()).collect(),
            items,
        })
    }

    /// Every sample of the given classes.
    pub fn all_of_classes(manifest: &DatasetManifest, classes: &[usize]) -> Result<Self> {
        let samples: Vec<usize> = (0..manifest.samples.len())
            .filter(|&s| classes.contains(&manifest.label(s)))
            .collect();
        Self::from_manifest(manifest, classes, &samples)
    }

    pub fn from_tensors(class_names: Vec<String>, images: Vec<ImageTensor>, labels: &[usize]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(CsawError::Shape(format!("{} images for {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(CsawError::UnknownClass { index: bad, classes: class_names.len() });
        }
        Ok(LabeledSet {
            class_names,
            items: images
                .into_iter()
                .zip(labels)
                .map(|(x, &label)| LabeledItem {
                    source: ImageSource::Tensor(Arc::new(x)),
                    label,
                    sample: None,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Decodes the listed items in parallel, preserving order.
    pub fn load(&self, indices: &[usize]) -> Result<Vec<ImageTensor>> {
        parallel::try_map(indices, |&i| match &self.items[i].source {
            ImageSource::Path(p) => load_image(p),
            ImageSource::Tensor(t) => Ok(t.as_ref().clone()),
        })
    }
}
