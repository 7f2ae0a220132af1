//! Upsampling reconstructor: global image embedding → `(3, 224, 224)`.
//!
//! The embedding is reshaped to a small seed map and passed through four
//! transposed convolutions (kernel 7, stride 3, padding 1, output padding 2,
//! so each stage maps `n → 3n + 4`). The first three stages halve the
//! channel count and are followed by ReLU; the last emits RGB. A bilinear
//! resize brings the result to the input resolution.

use ndarray::{Array1, Array3, ArrayView1};
use rand::Rng;

use crate::error::{CsawError, Result};
use crate::imageops::IMAGE_SIDE;
use crate::nn::{bilinear_resize, bilinear_resize_backward, ConvTranspose2d};

pub const KERNEL: usize = 7;
pub const STRIDE: usize = 3;
pub const PADDING: usize = 1;
pub const OUTPUT_PADDING: usize = 2;
pub const STAGES: usize = 4;

/// Default `(C0, h0, w0)` seed reshape for an embedding width.
pub fn default_seed_shape(embed_dim: usize) -> Result<(usize, usize, usize)> {
    match embed_dim {
        512 => Ok((32, 4, 4)),
        32 => Ok((8, 2, 2)),
        d if d % 4 == 0 && d / 4 >= 8 => Ok((d / 4, 2, 2)),
        d => Err(CsawError::Config(format!(
            "no default reconstructor seed shape for width {d}; set recon.seed_shape"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructorParams {
    pub seed_shape: (usize, usize, usize),
    pub stages: Vec<ConvTranspose2d>,
}

impl ReconstructorParams {
    pub fn zeros(seed_shape: (usize, usize, usize)) -> Result<Self> {
        let (c0, h0, w0) = seed_shape;
        if c0 < 8 || h0 == 0 || w0 == 0 {
            return Err(CsawError::Config(format!(
                "seed shape {seed_shape:?} needs at least 8 channels and non-empty spatial size"
            )));
        }
        let channels = [c0, c0 / 2, c0 / 4, c0 / 8, 3];
        let stages = channels
            .windows(2)
            .map(|w| ConvTranspose2d::zeros(w[0], w[1], KERNEL, STRIDE, PADDING, OUTPUT_PADDING))
            .collect();
        Ok(ReconstructorParams { seed_shape, stages })
    }

    pub fn init<R: Rng + ?Sized>(seed_shape: (usize, usize, usize), rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(seed_shape)?;
        for s in &mut p.stages {
            s.init_uniform(rng);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.seed_shape).expect("shape already validated")
    }

    pub fn embed_dim(&self) -> usize {
        let (c, h, w) = self.seed_shape;
        c * h * w
    }

    /// Spatial size after each stage, starting from the seed.
    pub fn spatial_plan(&self) -> Vec<(usize, usize)> {
        let (_, mut h, mut w) = self.seed_shape;
        let mut out = vec![(h, w)];
        for s in &self.stages {
            h = s.out_size(h);
            w = s.out_size(w);
            out.push((h, w));
        }
        out
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ReconCache {
    /// Input of every stage (post-ReLU for stages 2-4).
    inputs: Vec<Array3<f64>>,
    /// Pre-activation output of every stage.
    outputs: Vec<Array3<f64>>,
}

pub fn reconstruct(params: &ReconstructorParams, embedding: ArrayView1<'_, f64>) -> Result<Array3<f64>> {
    Ok(reconstruct_with_cache(params, embedding)?.0)
}

pub fn reconstruct_with_cache(
    params: &ReconstructorParams,
    embedding: ArrayView1<'_, f64>,
) -> Result<(Array3<f64>, ReconCache)> {
    if embedding.len() != params.embed_dim() {
        return Err(CsawError::Shape(format!(
            "reconstructor expects width {}, got {}",
            params.embed_dim(),
            embedding.len()
        )));
    }
    let mut x = embedding
        .to_owned()
        .into_shape_with_order(params.seed_shape)
        .expect("size checked");
    let mut cache = ReconCache {
        inputs: Vec::with_capacity(STAGES),
        outputs: Vec::with_capacity(STAGES),
    };
    for (i, stage) in params.stages.iter().enumerate() {
        let y = stage.forward(x.view());
        cache.inputs.push(x);
        x = if i + 1 < params.stages.len() {
            y.mapv(|v| v.max(0.0))
        } else {
            y.clone()
        };
        cache.outputs.push(y);
    }
    let out = bilinear_resize(x.view(), IMAGE_SIDE, IMAGE_SIDE);
    Ok((out, cache))
}

/// Accumulates parameter gradients into `grads` given `∂L/∂output`.
pub fn reconstruct_backward(
    params: &ReconstructorParams,
    cache: &ReconCache,
    grad_out: &Array3<f64>,
    grads: &mut ReconstructorParams,
) -> Array1<f64> {
    let (_, h, w) = cache.outputs.last().expect("four stages").dim();
    let mut g = bilinear_resize_backward(grad_out.view(), h, w);
    for i in (0..params.stages.len()).rev() {
        if i + 1 < params.stages.len() {
            g.zip_mut_with(&cache.outputs[i], |gv, &y| {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            });
        }
        g = params.stages[i].backward(cache.inputs[i].view(), g.view(), &mut grads.stages[i]);
    }
    let n = g.len();
    g.into_shape_with_order(n).expect("flat")
}
