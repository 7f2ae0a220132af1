//! The full trainable model around a frozen backbone.
//!
//! Work per batch splits into a frozen stage ([`CsawModel::encode_batch`]:
//! jigsaw plus both image encodings) and a trainable head stage
//! ([`CsawModel::forward`] / [`CsawModel::backward`]). Gradient checks
//! perturb parameters and re-run only the head stage.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Backbone, PromptTemplate, VisionOutput};
use crate::error::{CsawError, Result};
use crate::imageops::{jigsaw_array, ImageTensor, PatchPermutation};
use crate::losses::{self, LossCoefficients, LossReport, LossWeights};
use crate::nn::{stack_rows, ConvTranspose2d, Linear};
use crate::parallel;
use crate::sslhead::{self, ReconCache, ReconstructorParams};
use crate::vatp::{self, ClassifierOutput, PromptEmbeddings, StyleStats, VatCache, VatParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    Clean,
    Jumbled,
}

impl FromStr for ReconTarget {
    type Err = CsawError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(ReconTarget::Clean),
            "jumbled" => Ok(ReconTarget::Jumbled),
            other => Err(CsawError::Config(format!(
                "unknown reconstruction target '{other}' (expected clean or jumbled)"
            ))),
        }
    }
}

impl fmt::Display for ReconTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconTarget::Clean => "clean",
            ReconTarget::Jumbled => "jumbled",
        })
    }
}

/// Architecture choices fixed for the lifetime of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub context_length: usize,
    pub init_text: String,
    pub reduction: usize,
    pub tap_layers: Vec<usize>,
    pub seed_shape: (usize, usize, usize),
    pub recon_target: ReconTarget,
}

impl ModelSpec {
    /// Fills backbone-dependent defaults and checks consistency.
    pub fn resolve(
        backbone: &dyn Backbone,
        context_length: usize,
        init_text: &str,
        reduction: usize,
        tap_layers: Option<Vec<usize>>,
        seed_shape: Option<(usize, usize, usize)>,
        recon_target: ReconTarget,
    ) -> Result<Self> {
        if context_length == 0 {
            return Err(CsawError::Config("prompt.context_length must be at least 1".into()));
        }
        let available = backbone.tap_channels().len();
        let tap_layers = match tap_layers {
            Some(t) => t,
            None => backbone::default_tap_layers(available, context_length)?,
        };
        if tap_layers.len() != context_length {
            return Err(CsawError::Config(format!(
                "{} tap layers but context length {context_length}; one visual token is made per tapped layer",
                tap_layers.len()
            )));
        }
        if let Some(&bad) = tap_layers.iter().find(|&&t| t >= available) {
            return Err(CsawError::Config(format!(
                "tap layer {bad} out of range; {} has {available} tap points",
                backbone.name()
            )));
        }
        let seed_shape = match seed_shape {
            Some(s) => s,
            None => sslhead::default_seed_shape(backbone.embed_dim())?,
        };
        if seed_shape.0 * seed_shape.1 * seed_shape.2 != backbone.embed_dim() {
            return Err(CsawError::Config(format!(
                "seed shape {seed_shape:?} does not hold {} values",
                backbone.embed_dim()
            )));
        }
        Ok(ModelSpec {
            context_length,
            init_text: init_text.to_string(),
            reduction,
            tap_layers,
            seed_shape,
            recon_target,
        })
    }
}

/// Everything the optimizer is allowed to touch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    /// Unified context vectors `(M, d_t)`.
    pub context: Array2<f64>,
    pub vat: VatParams,
    pub recon: ReconstructorParams,
}

fn linear_tensors<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
    out.push((format!("{prefix}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().expect("standard layout")));
    out.push((format!("{prefix}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().expect("standard layout")));
}

fn linear_tensors_mut<'a>(prefix: &str, l: &'a mut Linear, out: &mut Vec<(String, &'a mut [f64])>) {
    out.push((format!("{prefix}.weight"), l.weight.as_slice_mut().expect("standard layout")));
    out.push((format!("{prefix}.bias"), l.bias.as_slice_mut().expect("standard layout")));
}

fn conv_tensors<'a>(prefix: &str, c: &'a ConvTranspose2d, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
    out.push((format!("{prefix}.weight"), c.weight.shape().to_vec(), c.weight.as_slice().expect("standard layout")));
    out.push((format!("{prefix}.bias"), c.bias.shape().to_vec(), c.bias.as_slice().expect("standard layout")));
}

fn conv_tensors_mut<'a>(prefix: &str, c: &'a mut ConvTranspose2d, out: &mut Vec<(String, &'a mut [f64])>) {
    out.push((format!("{prefix}.weight"), c.weight.as_slice_mut().expect("standard layout")));
    out.push((format!("{prefix}.bias"), c.bias.as_slice_mut().expect("standard layout")));
}

impl TrainableParams {
    pub fn init(backbone: &dyn Backbone, spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::imageops::derive_seed(&[seed, 0x1417]));
        let all = backbone.tap_channels();
        let channels: Vec<usize> = spec.tap_layers.iter().map(|&t| all[t]).collect();
        let d_t = backbone.token_dim();
        let init = backbone.token_embed(&spec.init_text)?;
        let context = if init.nrows() == spec.context_length {
            init
        } else {
            log::warn!(
                "init text '{}' has {} tokens, context length is {}; using random context",
                spec.init_text,
                init.nrows(),
                spec.context_length
            );
            let normal = Normal::new(0.0, 0.02 * backbone.token_scale()).expect("positive std");
            Array2::from_shape_fn((spec.context_length, d_t), |_| normal.sample(&mut rng))
        };
        Ok(TrainableParams {
            context,
            vat: VatParams::init(&channels, d_t, spec.reduction, backbone.token_scale(), &mut rng)?,
            recon: ReconstructorParams::init(spec.seed_shape, &mut rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        TrainableParams {
            context: Array2::zeros(self.context.raw_dim()),
            vat: self.vat.zeros_like(),
            recon: self.recon.zeros_like(),
        }
    }

    /// Named tensors with shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![(
            "context".to_string(),
            self.context.shape().to_vec(),
            self.context.as_slice().expect("standard layout"),
        )];
        for (l, p) in self.vat.projectors.iter().enumerate() {
            linear_tensors(&format!("vat.projector{l}"), p, &mut out);
        }
        linear_tensors("vat.fc1", &self.vat.fc1, &mut out);
        linear_tensors("vat.fc2", &self.vat.fc2, &mut out);
        for (i, s) in self.recon.stages.iter().enumerate() {
            conv_tensors(&format!("recon.stage{i}"), s, &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![(
            "context".to_string(),
            self.context.as_slice_mut().expect("standard layout"),
        )];
        for (l, p) in self.vat.projectors.iter_mut().enumerate() {
            linear_tensors_mut(&format!("vat.projector{l}"), p, &mut out);
        }
        linear_tensors_mut("vat.fc1", &mut self.vat.fc1, &mut out);
        linear_tensors_mut("vat.fc2", &mut self.vat.fc2, &mut out);
        for (i, s) in self.recon.stages.iter_mut().enumerate() {
            conv_tensors_mut(&format!("recon.stage{i}"), s, &mut out);
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &TrainableParams, scale: f64) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, _, t)| t.to_vec()).collect();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Class-name prompt templates for one label space.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub class_names: Vec<String>,
    pub templates: Vec<PromptTemplate>,
}

impl PromptBank {
    pub fn new(backbone: &dyn Backbone, class_names: &[String], context_length: usize) -> Result<Self> {
        if class_names.is_empty() {
            return Err(CsawError::InvalidArgument("no classes to build prompts for".into()));
        }
        Ok(PromptBank {
            class_names: class_names.to_vec(),
            templates: backbone::prompt_templates(backbone, class_names, context_length)?,
        })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }
}

/// Frozen-backbone outputs for one batch of `(x, x′)` pairs.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub labels: Vec<usize>,
    pub clean: Vec<VisionOutput>,
    pub jumbled: Vec<VisionOutput>,
    /// Reconstruction targets, one per sample.
    pub targets: Vec<Array3<f64>>,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardState {
    pub report: LossReport,
    pub probs: Array2<f64>,
    labels: Vec<usize>,
    vat_jumbled: VatCache,
    vat_clean: VatCache,
    prompts_jumbled: PromptEmbeddings,
    prompts_clean: PromptEmbeddings,
    classifier: ClassifierOutput,
    recon: Vec<(Array3<f64>, ReconCache)>,
}

pub struct CsawModel {
    pub backbone: Arc<dyn Backbone>,
    pub spec: ModelSpec,
    pub params: TrainableParams,
}

fn style_of(outputs: &[VisionOutput]) -> Result<StyleStats> {
    let taps: Vec<_> = outputs.iter().map(|o| o.taps.clone()).collect();
    vatp::compute_style_stats(&taps)
}

fn embeddings_of(outputs: &[VisionOutput]) -> Array2<f64> {
    stack_rows(&outputs.iter().map(|o| o.embedding.clone()).collect::<Vec<_>>())
}

impl CsawModel {
    pub fn new(backbone: Arc<dyn Backbone>, spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = TrainableParams::init(backbone.as_ref(), &spec, seed)?;
        Ok(CsawModel { backbone, spec, params })
    }

    pub fn prompt_bank(&self, class_names: &[String]) -> Result<PromptBank> {
        PromptBank::new(self.backbone.as_ref(), class_names, self.spec.context_length)
    }

    /// Jigsaws every image and encodes both views with the frozen backbone.
    pub fn encode_batch(
        &self,
        images: &[ImageTensor],
        perms: &[PatchPermutation],
        labels: &[usize],
    ) -> Result<EncodedBatch> {
        if images.len() != perms.len() || images.len() != labels.len() {
            return Err(CsawError::Shape(format!(
                "{} images, {} permutations, {} labels",
                images.len(),
                perms.len(),
                labels.len()
            )));
        }
        let jumbled = images
            .iter()
            .zip(perms)
            .map(|(x, p)| ImageTensor::new(jigsaw_array(x.view(), p)?))
            .collect::<Result<Vec<_>>>()?;
        let bb = self.backbone.as_ref();
        let clean_out = backbone::encode_images(bb, images, &self.spec.tap_layers)?;
        let jumbled_out = backbone::encode_images(bb, &jumbled, &self.spec.tap_layers)?;
        let targets = match self.spec.recon_target {
            ReconTarget::Clean => images.iter().map(|x| x.as_array().clone()).collect(),
            ReconTarget::Jumbled => jumbled.into_iter().map(ImageTensor::into_inner).collect(),
        };
        Ok(EncodedBatch {
            labels: labels.to_vec(),
            clean: clean_out,
            jumbled: jumbled_out,
            targets,
        })
    }

    /// Head forward pass. `with_recon = false` skips the reconstructor and
    /// reports a zero reconstruction loss.
    pub fn forward_with(
        &self,
        params: &TrainableParams,
        batch: &EncodedBatch,
        bank: &PromptBank,
        weights: &LossWeights,
        with_recon: bool,
    ) -> Result<ForwardState> {
        if batch.is_empty() {
            return Err(CsawError::InvalidArgument("empty batch".into()));
        }
        let bb = self.backbone.as_ref();
        let (tok_j, vat_jumbled) = vatp::vat_forward(&style_of(&batch.jumbled)?, &params.vat)?;
        let (tok_c, vat_clean) = vatp::vat_forward(&style_of(&batch.clean)?, &params.vat)?;
        let prompts_jumbled = vatp::assemble_prompts(params.context.view(), tok_j.view(), &bank.templates, bb)?;
        let prompts_clean = vatp::assemble_prompts(params.context.view(), tok_c.view(), &bank.templates, bb)?;
        let ape = vatp::ape(prompts_jumbled.emb.view(), prompts_clean.emb.view())?;
        let z_j = embeddings_of(&batch.jumbled);
        let z_c = embeddings_of(&batch.clean);
        let classifier = vatp::classify(z_j.view(), ape.view(), bb.temperature())?;
        let probs = classifier.probs.clone();
        let ce = losses::cross_entropy(probs.view(), &batch.labels)?;
        let dm = losses::diversity_loss(probs.view(), weights.dm_mode)?;
        let ssl = losses::barlow_twins(z_j.view(), z_c.view(), weights.lambda_bt)?;
        let (recon_loss, recon) = if with_recon {
            let recon = parallel::try_map(&batch.jumbled, |o| {
                sslhead::reconstruct_with_cache(&params.recon, o.embedding.view())
            })?;
            let x_hat: Vec<Array3<f64>> = recon.iter().map(|(x, _)| x.clone()).collect();
            let targets: Vec<_> = batch.targets.iter().map(|t| t.view()).collect();
            (losses::reconstruction_loss(&x_hat, &targets)?, recon)
        } else {
            (0.0, Vec::new())
        };
        Ok(ForwardState {
            report: losses::total_loss(ce, ssl, recon_loss, dm, weights),
            probs,
            labels: batch.labels.clone(),
            vat_jumbled,
            vat_clean,
            prompts_jumbled,
            prompts_clean,
            classifier,
            recon,
        })
    }

    pub fn forward(
        &self,
        params: &TrainableParams,
        batch: &EncodedBatch,
        bank: &PromptBank,
        weights: &LossWeights,
    ) -> Result<ForwardState> {
        self.forward_with(params, batch, bank, weights, true)
    }

    /// Gradient of `coeffs · (ce, ssl, recon, dm)` with respect to every
    /// trainable tensor.
    ///
    /// The redundancy-reduction term compares two outputs of the frozen
    /// image encoder, so it contributes nothing here whatever its weight.
    pub fn backward(
        &self,
        params: &TrainableParams,
        batch: &EncodedBatch,
        state: &ForwardState,
        weights: &LossWeights,
        coeffs: LossCoefficients,
    ) -> Result<TrainableParams> {
        let bb = self.backbone.as_ref();
        let mut grads = params.zeros_like();

        let p = state.probs.view();
        let mut g_logits = losses::cross_entropy_grad_logits(p, &state.labels) * coeffs.ce;
        if coeffs.dm != 0.0 {
            g_logits = g_logits + losses::diversity_grad_logits(p, weights.dm_mode) * coeffs.dm;
        }
        let g_ape = vatp::classify_backward(&state.classifier, g_logits.view());
        let g_half = &g_ape * 0.5;
        for (prompts, cache) in [
            (&state.prompts_jumbled, &state.vat_jumbled),
            (&state.prompts_clean, &state.vat_clean),
        ] {
            let g_cond = vatp::prompts_backward(prompts, g_half.view(), bb)?;
            grads.context += &g_cond;
            vatp::vat_backward(&params.vat, cache, g_cond.view(), &mut grads.vat);
        }

        if coeffs.recon != 0.0 {
            if state.recon.len() != batch.len() {
                return Err(CsawError::InvalidArgument(
                    "reconstruction gradient requested but the forward pass skipped it".into(),
                ));
            }
            let x_hat: Vec<Array3<f64>> = state.recon.iter().map(|(x, _)| x.clone()).collect();
            let targets: Vec<_> = batch.targets.iter().map(|t| t.view()).collect();
            let g_out = losses::reconstruction_grad(&x_hat, &targets)?;
            let per_sample = parallel::map_range(batch.len(), |i| {
                let mut g = params.recon.zeros_like();
                let go = &g_out[i] * coeffs.recon;
                sslhead::reconstruct_backward(&params.recon, &state.recon[i].1, &go, &mut g);
                g
            });
            for g in per_sample {
                for (acc, s) in grads.recon.stages.iter_mut().zip(g.stages) {
                    acc.weight += &s.weight;
                    acc.bias += &s.bias;
                }
            }
        }
        Ok(grads)
    }

    /// Class probabilities for a batch. Clean inputs by default; with
    /// permutations the jumbled view is classified against the averaged
    /// prompts of both views.
    pub fn predict(
        &self,
        params: &TrainableParams,
        images: &[ImageTensor],
        bank: &PromptBank,
        jumble: Option<&[PatchPermutation]>,
    ) -> Result<Array2<f64>> {
        if images.is_empty() {
            return Err(CsawError::InvalidArgument("empty batch".into()));
        }
        let bb = self.backbone.as_ref();
        let clean = backbone::encode_images(bb, images, &self.spec.tap_layers)?;
        let (tok_c, _) = vatp::vat_forward(&style_of(&clean)?, &params.vat)?;
        let prompts_c = vatp::assemble_prompts(params.context.view(), tok_c.view(), &bank.templates, bb)?;
        match jumble {
            None => vatp::predict_probs(embeddings_of(&clean).view(), prompts_c.emb.view(), bb.temperature()),
            Some(perms) => {
                let labels = vec![0; images.len()];
                let batch = self.encode_batch(images, perms, &labels)?;
                let (tok_j, _) = vatp::vat_forward(&style_of(&batch.jumbled)?, &params.vat)?;
                let prompts_j =
                    vatp::assemble_prompts(params.context.view(), tok_j.view(), &bank.templates, bb)?;
                let ape = vatp::ape(prompts_j.emb.view(), prompts_c.emb.view())?;
                vatp::predict_probs(embeddings_of(&batch.jumbled).view(), ape.view(), bb.temperature())
            }
        }
    }

    /// Reconstruction of one image from its jumbled view.
    pub fn reconstruct_image(&self, params: &TrainableParams, jumbled: &ImageTensor) -> Result<Array3<f64>> {
        let out = self.backbone.encode_image(jumbled, &[])?;
        sslhead::reconstruct(&params.recon, out.embedding.view())
    }
}

/// Row-wise argmax.
pub fn argmax_rows(probs: ArrayView2<'_, f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::standin::StandinBackbone;
    use crate::imageops::sample_permutation;
    use ndarray::Array3;
    use rand::Rng;

    pub(crate) fn tiny_model() -> CsawModel {
        let bb: Arc<dyn Backbone> = Arc::new(StandinBackbone::new(7));
        let spec = ModelSpec::resolve(bb.as_ref(), 4, "a photo of a", 4, None, None, ReconTarget::Clean).unwrap();
        CsawModel::new(bb, spec, 1).unwrap()
    }

    fn random_images(n: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ImageTensor::new(Array3::from_shape_fn((3, 224, 224), |_| rng.random_range(-1.5..1.5))).unwrap())
            .collect()
    }

    #[test]
    fn spec_defaults_for_standin() {
        let m = tiny_model();
        assert_eq!(m.spec.tap_layers, vec![0, 1, 2, 3]);
        assert_eq!(m.spec.seed_shape, (8, 2, 2));
        assert_eq!(m.params.context.dim(), (4, 16));
        // initialized from the four words of the init text
        assert_eq!(m.params.context, m.backbone.token_embed("a photo of a").unwrap());
    }

    #[test]
    fn spec_rejects_tap_count_mismatch() {
        let bb = StandinBackbone::new(7);
        assert!(ModelSpec::resolve(&bb, 4, "", 4, Some(vec![0, 1]), None, ReconTarget::Clean).is_err());
        assert!(ModelSpec::resolve(&bb, 2, "", 4, Some(vec![0, 9]), None, ReconTarget::Clean).is_err());
        assert!(ModelSpec::resolve(&bb, 4, "", 4, None, Some((4, 2, 2)), ReconTarget::Clean).is_err());
    }

    #[test]
    fn random_context_when_init_text_length_differs() {
        let bb: Arc<dyn Backbone> = Arc::new(StandinBackbone::new(7));
        let spec = ModelSpec::resolve(bb.as_ref(), 2, "a photo of a", 4, None, None, ReconTarget::Clean).unwrap();
        let m = CsawModel::new(bb, spec, 1).unwrap();
        assert_eq!(m.params.context.dim(), (2, 16));
        assert!(m.params.context.iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn parameter_names_cover_three_groups() {
        let m = tiny_model();
        let names: Vec<String> = m.params.tensors().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names[0], "context");
        assert_eq!(names.len(), 1 + 2 * 4 + 4 + 8);
        assert!(names.iter().all(|n| n == "context" || n.starts_with("vat.") || n.starts_with("recon.")));
    }

    #[test]
    fn forward_report_and_probs() {
        let m = tiny_model();
        let images = random_images(3, 2);
        let perms: Vec<_> = (0..3).map(|i| sample_permutation(4, i).unwrap()).collect();
        let batch = m.encode_batch(&images, &perms, &[0, 1, 1]).unwrap();
        let bank = m.prompt_bank(&["river".into(), "forest".into()]).unwrap();
        let w = LossWeights::default();
        let st = m.forward(&m.params, &batch, &bank, &w).unwrap();
        assert_eq!(st.probs.dim(), (3, 2));
        let r = st.report;
        assert!((r.total - (r.ce + 0.5 * (r.ssl + r.recon) + 0.5 * r.dm)).abs() < 1e-9);
        assert!(r.ce > 0.0 && r.ssl >= 0.0 && r.recon > 0.0 && r.dm >= 0.0);
    }

    #[test]
    fn predict_rows_sum_to_one() {
        let m = tiny_model();
        let images = random_images(2, 5);
        let bank = m.prompt_bank(&["a".into(), "b".into(), "c".into()]).unwrap();
        let p = m.predict(&m.params, &images, &bank, None).unwrap();
        let perms: Vec<_> = (0..2).map(|i| sample_permutation(4, i).unwrap()).collect();
        let q = m.predict(&m.params, &images, &bank, Some(&perms)).unwrap();
        for r in p.rows().into_iter().chain(q.rows()) {
            assert!((r.sum() - 1.0).abs() < 1e-9);
        }
        // identity permutations reduce the jumbled path to the clean one
        let ids = vec![PatchPermutation::identity(4); 2];
        let r = m.predict(&m.params, &images, &bank, Some(&ids)).unwrap();
        for (a, b) in p.iter().zip(r.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
