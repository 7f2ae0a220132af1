//! Frozen vision-language backbones.
//!
//! A backbone encodes images (returning a global embedding plus intermediate
//! feature maps) and token sequences. Text encoding exposes a
//! vector-Jacobian product so gradients reach the learnable prompt tokens
//! without the backbone itself ever being updated.

use std::ops::Range;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use sha2::{Digest, Sha256};

use crate::error::{CsawError, Result};
use crate::imageops::ImageTensor;
use crate::parallel;

pub mod clip;
pub mod standin;
pub mod tokenizer;

pub use clip::{ClipBackbone, ClipConfig};
pub use standin::StandinBackbone;

/// Feature maps tapped from the vision encoder, each `(C, H, W)`, in
/// network order.
pub type TappedFeatures = Vec<Array3<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct VisionOutput {
    pub embedding: Array1<f64>,
    pub taps: TappedFeatures,
}

/// Token embeddings for one class prompt with placeholder rows where the
/// learnable context goes.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub class_name: String,
    /// `(L, d_t)` including start/end tokens.
    pub tokens: Array2<f64>,
    pub context_slots: Range<usize>,
}

impl PromptTemplate {
    /// Copy of the template with `context` (`(M, d_t)`) written into the
    /// placeholder rows.
    pub fn fill(&self, context: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if context.nrows() != self.context_slots.len() || context.ncols() != self.tokens.ncols() {
            return Err(CsawError::Shape(format!(
                "context {:?} does not fit template slots {:?} of width {}",
                context.dim(),
                self.context_slots,
                self.tokens.ncols()
            )));
        }
        let mut t = self.tokens.clone();
        t.slice_mut(ndarray::s![self.context_slots.clone(), ..]).assign(&context);
        Ok(t)
    }
}

pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    /// Width `d_v` of image and text embeddings.
    fn embed_dim(&self) -> usize;

    /// Width `d_t` of token embeddings.
    fn token_dim(&self) -> usize;

    /// Channel count of every available tap point, in network order.
    fn tap_channels(&self) -> Vec<usize>;

    /// Divisor applied to cosine similarities before the softmax.
    fn temperature(&self) -> f64;

    /// Longest token sequence the text encoder accepts.
    fn max_text_len(&self) -> usize;

    /// Typical magnitude of a single token-embedding entry; used to scale
    /// the initialization of modules that write into token space.
    fn token_scale(&self) -> f64;

    /// Encodes one image and returns the requested tap points.
    fn encode_image(&self, x: &ImageTensor, taps: &[usize]) -> Result<VisionOutput>;

    /// Token embeddings for `text` without start/end markers.
    fn token_embed(&self, text: &str) -> Result<Array2<f64>>;

    /// Builds `[start] X·M [class tokens] . [end]` with `M` context slots.
    fn prompt_template(&self, class_name: &str, context_len: usize) -> Result<PromptTemplate>;

    /// Encodes a full token sequence `(L, d_t)` into a `d_v` embedding.
    fn encode_text(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>>;

    /// `(∂ encode_text / ∂ tokens)ᵀ · grad`.
    fn encode_text_vjp(
        &self,
        tokens: ArrayView2<'_, f64>,
        grad: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>>;

    /// Visits every parameter tensor as `(name, values)` in a fixed order.
    fn visit_parameters(&self, f: &mut dyn FnMut(&str, &[f64]));

    /// SHA-256 over parameter names and little-endian values.
    fn checksum_parameters(&self) -> String {
        let mut h = Sha256::new();
        self.visit_parameters(&mut |name, values| {
            h.update(name.as_bytes());
            h.update((values.len() as u64).to_le_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Evenly spaced tap points: `n` of `available`, ending at the last one.
pub fn default_tap_layers(available: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > available {
        return Err(CsawError::Config(format!(
            "cannot pick {n} tap layers from {available} available"
        )));
    }
    Ok((1..=n).map(|j| (j * available).div_ceil(n) - 1).collect())
}

/// Encodes a batch in parallel. Any non-finite output is a hard error.
pub fn encode_images(
    backbone: &dyn Backbone,
    images: &[ImageTensor],
    taps: &[usize],
) -> Result<Vec<VisionOutput>> {
    let outs = parallel::try_map(images, |x| backbone.encode_image(x, taps))?;
    for (i, o) in outs.iter().enumerate() {
        let bad = o.embedding.iter().any(|v| !v.is_finite())
            || o.taps.iter().any(|t| t.iter().any(|v| !v.is_finite()));
        if bad {
            return Err(CsawError::NonFinite(format!(
                "{} image embedding for batch item {i} (backbone misload?)",
                backbone.name()
            )));
        }
        if o.embedding.dot(&o.embedding) == 0.0 {
            return Err(CsawError::NonFinite(format!(
                "zero-norm image embedding for batch item {i}"
            )));
        }
    }
    Ok(outs)
}

/// Encodes one token sequence per class into a `(K, d_v)` array.
pub fn encode_prompts(backbone: &dyn Backbone, sequences: &[Array2<f64>]) -> Result<Array2<f64>> {
    let rows = parallel::try_map(sequences, |s| backbone.encode_text(s.view()))?;
    Ok(crate::nn::stack_rows(&rows))
}

/// Token templates for every class, checking the length limit.
pub fn prompt_templates(
    backbone: &dyn Backbone,
    class_names: &[String],
    context_len: usize,
) -> Result<Vec<PromptTemplate>> {
    class_names
        .iter()
        .map(|c| {
            let t = backbone.prompt_template(&c.replace('_', " "), context_len)?;
            if t.tokens.nrows() > backbone.max_text_len() {
                return Err(CsawError::SequenceTooLong {
                    class: c.clone(),
                    len: t.tokens.nrows(),
                    limit: backbone.max_text_len(),
                });
            }
            Ok(PromptTemplate {
                class_name: c.clone(),
                ..t
            })
        })
        .collect()
}
