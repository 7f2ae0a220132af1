//! Visual attentive text prompting.
//!
//! Batch style statistics from tapped vision features are projected into
//! token space, gated by a sigmoid bottleneck mask applied residually, and
//! added to the learnable context before text encoding. The prompt
//! embeddings from the jumbled and clean views are averaged and compared to
//! image embeddings by temperature-scaled cosine similarity.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::backbone::{self, Backbone, PromptTemplate, TappedFeatures};
use crate::error::{CsawError, Result};
use crate::nn::{l2_normalize_backward, l2_normalize_rows, sigmoid, spatial_mean, Linear};
use crate::parallel;

/// Per-layer mean feature vectors of one batch (the domain "style").
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    pub mu: Vec<Array1<f64>>,
}

/// Averages every tapped layer over the batch and all spatial positions.
pub fn compute_style_stats(batch: &[TappedFeatures]) -> Result<StyleStats> {
    let first = batch
        .first()
        .ok_or_else(|| CsawError::InvalidArgument("style statistics need a non-empty batch".into()))?;
    let n_layers = first.len();
    let mut mu: Vec<Array1<f64>> = first.iter().map(|t| Array1::zeros(t.dim().0)).collect();
    for (b, taps) in batch.iter().enumerate() {
        if taps.len() != n_layers {
            return Err(CsawError::Shape(format!(
                "batch item {b} has {} tapped layers, expected {n_layers}",
                taps.len()
            )));
        }
        for (l, t) in taps.iter().enumerate() {
            if t.dim() != first[l].dim() {
                return Err(CsawError::Shape(format!(
                    "tapped layer {l} of batch item {b} is {:?}, expected {:?}",
                    t.dim(),
                    first[l].dim()
                )));
            }
            mu[l] += &spatial_mean(t.view());
        }
    }
    let n = batch.len() as f64;
    for m in &mut mu {
        *m /= n;
    }
    Ok(StyleStats { mu })
}

/// Trainable parameters of the token generator.
#[derive(Debug, Clone, PartialEq)]
pub struct VatParams {
    /// One projector per tapped layer, `C_l → d_t`.
    pub projectors: Vec<Linear>,
    /// Bottleneck `d_t → d_t / r`.
    pub fc1: Linear,
    /// Bottleneck `d_t / r → d_t`, followed by a sigmoid.
    pub fc2: Linear,
}

impl VatParams {
    /// Projectors are scaled so projected style vectors land at roughly the
    /// magnitude of token embeddings (`token_scale`).
    pub fn init<R: Rng + ?Sized>(
        tap_channels: &[usize],
        token_dim: usize,
        reduction: usize,
        token_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || token_dim / reduction == 0 {
            return Err(CsawError::Config(format!(
                "reduction {reduction} is invalid for token width {token_dim}"
            )));
        }
        let hidden = token_dim / reduction;
        Ok(VatParams {
            projectors: tap_channels
                .iter()
                .map(|&c| Linear::normal(token_dim, c, token_scale / (c as f64).sqrt(), rng))
                .collect(),
            fc1: Linear::normal(hidden, token_dim, 1.0 / (token_dim as f64).sqrt(), rng),
            fc2: Linear::normal(token_dim, hidden, 1.0 / (hidden as f64).sqrt(), rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        VatParams {
            projectors: self
                .projectors
                .iter()
                .map(|p| Linear::zeros(p.out_dim(), p.in_dim()))
                .collect(),
            fc1: Linear::zeros(self.fc1.out_dim(), self.fc1.in_dim()),
            fc2: Linear::zeros(self.fc2.out_dim(), self.fc2.in_dim()),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    /// `sigmoid(fc2(relu(fc1(s))))`, within [0, 1] (strictly inside unless a
    /// logit saturates f64).
    pub fn mask(&self, style: ArrayView1<'_, f64>) -> Array1<f64> {
        let h = self.fc1.forward(style).mapv(|v| v.max(0.0));
        self.fc2.forward(h.view()).mapv(sigmoid)
    }
}

/// `a ⊙ s + s`.
pub fn apply_attention(mask: ArrayView1<'_, f64>, style: ArrayView1<'_, f64>) -> Array1<f64> {
    &mask * &style + style
}

/// Intermediate values of one token-generator pass.
#[derive(Debug, Clone)]
pub struct VatCache {
    mu: Vec<Array1<f64>>,
    style: Vec<Array1<f64>>,
    hidden_pre: Vec<Array1<f64>>,
    mask: Vec<Array1<f64>>,
}

/// One visual token per tapped layer, as rows of an `(n, d_t)` array.
pub fn visual_attentive_tokens(stats: &StyleStats, params: &VatParams) -> Result<Array2<f64>> {
    Ok(vat_forward(stats, params)?.0)
}

pub fn vat_forward(stats: &StyleStats, params: &VatParams) -> Result<(Array2<f64>, VatCache)> {
    if stats.mu.len() != params.projectors.len() {
        return Err(CsawError::Shape(format!(
            "{} style vectors for {} projectors",
            stats.mu.len(),
            params.projectors.len()
        )));
    }
    let d = params.token_dim();
    let n = stats.mu.len();
    let mut tokens = Array2::zeros((n, d));
    let mut cache = VatCache {
        mu: stats.mu.clone(),
        style: Vec::with_capacity(n),
        hidden_pre: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
    };
    for (l, (mu, proj)) in stats.mu.iter().zip(&params.projectors).enumerate() {
        if mu.len() != proj.in_dim() {
            return Err(CsawError::Shape(format!(
                "layer {l}: style width {} but projector expects {}",
                mu.len(),
                proj.in_dim()
            )));
        }
        let style = proj.forward(mu.view());
        let hidden_pre = params.fc1.forward(style.view());
        let h = hidden_pre.mapv(|v| v.max(0.0));
        let mask = params.fc2.forward(h.view()).mapv(sigmoid);
        tokens.row_mut(l).assign(&apply_attention(mask.view(), style.view()));
        cache.style.push(style);
        cache.hidden_pre.push(hidden_pre);
        cache.mask.push(mask);
    }
    Ok((tokens, cache))
}

/// Accumulates `∂L/∂params` into `grads` given `∂L/∂tokens`.
pub fn vat_backward(
    params: &VatParams,
    cache: &VatCache,
    grad_tokens: ArrayView2<'_, f64>,
    grads: &mut VatParams,
) {
    for l in 0..cache.style.len() {
        let g = grad_tokens.row(l);
        let s = &cache.style[l];
        let a = &cache.mask[l];
        // token = a ⊙ s + s
        let g_a = &g * s;
        let mut g_s = &g * &(a + 1.0);
        let g_z = &g_a * &a.mapv(|v| v * (1.0 - v));
        let h = cache.hidden_pre[l].mapv(|v| v.max(0.0));
        let g_h = params.fc2.backward(h.view(), g_z.view(), &mut grads.fc2);
        let g_pre = &g_h * &cache.hidden_pre[l].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        g_s += &params.fc1.backward(s.view(), g_pre.view(), &mut grads.fc1);
        params.projectors[l].backward(cache.mu[l].view(), g_s.view(), &mut grads.projectors[l]);
    }
}

/// Text-encoded class prompts for one conditioning path.
#[derive(Debug, Clone)]
pub struct PromptEmbeddings {
    pub sequences: Vec<Array2<f64>>,
    /// Raw encoder outputs `(K, d_v)`.
    pub raw: Array2<f64>,
    /// Row-normalized prompt embeddings `(K, d_v)`.
    pub emb: Array2<f64>,
    norms: Array1<f64>,
    context_slots: Vec<std::ops::Range<usize>>,
}

/// Writes `context + visual_tokens` into every class template and encodes
/// the sequences with the frozen text encoder.
pub fn assemble_prompts(
    context: ArrayView2<'_, f64>,
    visual_tokens: ArrayView2<'_, f64>,
    templates: &[PromptTemplate],
    backbone: &dyn Backbone,
) -> Result<PromptEmbeddings> {
    if templates.is_empty() {
        return Err(CsawError::InvalidArgument("no classes to build prompts for".into()));
    }
    if context.dim() != visual_tokens.dim() {
        return Err(CsawError::Shape(format!(
            "context {:?} and visual tokens {:?} differ",
            context.dim(),
            visual_tokens.dim()
        )));
    }
    let conditioned = &context + &visual_tokens;
    let sequences = templates
        .iter()
        .map(|t| t.fill(conditioned.view()))
        .collect::<Result<Vec<_>>>()?;
    let raw = backbone::encode_prompts(backbone, &sequences)?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(CsawError::NonFinite("prompt embeddings".into()));
    }
    let (emb, norms) = l2_normalize_rows(raw.view());
    Ok(PromptEmbeddings {
        sequences,
        raw,
        emb,
        norms,
        context_slots: templates.iter().map(|t| t.context_slots.clone()).collect(),
    })
}

/// Given `∂L/∂emb` (normalized rows), returns `∂L/∂(context + visual tokens)`.
pub fn prompts_backward(
    prompts: &PromptEmbeddings,
    grad_emb: ArrayView2<'_, f64>,
    backbone: &dyn Backbone,
) -> Result<Array2<f64>> {
    let k = prompts.sequences.len();
    let per_class = parallel::map_range(k, |i| -> Result<Array2<f64>> {
        let g_raw = l2_normalize_backward(prompts.emb.row(i), prompts.norms[i], grad_emb.row(i));
        let g_seq = backbone.encode_text_vjp(prompts.sequences[i].view(), g_raw.view())?;
        Ok(g_seq.slice(s![prompts.context_slots[i].clone(), ..]).to_owned())
    });
    let mut total: Option<Array2<f64>> = None;
    for g in per_class {
        let g = g?;
        match &mut total {
            Some(t) => *t += &g,
            None => total = Some(g),
        }
    }
    Ok(total.expect("at least one class"))
}

/// Elementwise mean of two prompt-embedding arrays.
pub fn ape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(CsawError::Shape(format!("ape of {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok((&a + &b) * 0.5)
}

/// Cached values of the cosine classifier for the backward pass.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub probs: Array2<f64>,
    pub logits: Array2<f64>,
    image_hat: Array2<f64>,
    class_hat: Array2<f64>,
    class_norms: Array1<f64>,
    temperature: f64,
}

fn check_rows(x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    for (i, r) in x.rows().into_iter().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(CsawError::NonFinite(format!("{what} row {i}")));
        }
        if r.dot(&r) == 0.0 {
            return Err(CsawError::InvalidArgument(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Softmax over `cos(image, class_k) / temperature`.
pub fn classify(
    image_emb: ArrayView2<'_, f64>,
    class_emb: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<ClassifierOutput> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(CsawError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if image_emb.ncols() != class_emb.ncols() {
        return Err(CsawError::Shape(format!(
            "image width {} vs class width {}",
            image_emb.ncols(),
            class_emb.ncols()
        )));
    }
    check_rows(image_emb, "image embedding")?;
    check_rows(class_emb, "class embedding")?;
    let (image_hat, _) = l2_normalize_rows(image_emb);
    let (class_hat, class_norms) = l2_normalize_rows(class_emb);
    let logits = image_hat.dot(&class_hat.t()) / temperature;
    let probs = softmax_rows(logits.view());
    Ok(ClassifierOutput {
        probs,
        logits,
        image_hat,
        class_hat,
        class_norms,
        temperature,
    })
}

pub fn predict_probs(
    image_emb: ArrayView2<'_, f64>,
    class_emb: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<Array2<f64>> {
    Ok(classify(image_emb, class_emb, temperature)?.probs)
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// `∂L/∂class_emb` given `∂L/∂logits`. Image embeddings come from the
/// frozen encoder, so no gradient is returned for them.
pub fn classify_backward(out: &ClassifierOutput, grad_logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let g_hat = grad_logits.t().dot(&out.image_hat) / out.temperature;
    let mut g = Array2::zeros(out.class_hat.raw_dim());
    for (k, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&l2_normalize_backward(
            out.class_hat.row(k),
            out.class_norms[k],
            g_hat.row(k),
        ));
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn style_stats_identical_maps() {
        let mut r = rng(0);
        let t: Array3<f64> = Array3::from_shape_simple_fn((3, 2, 2), || r.random_range(-1.0..1.0));
        let batch = vec![vec![t.clone()], vec![t.clone()], vec![t.clone()]];
        let s = compute_style_stats(&batch).unwrap();
        let expected = spatial_mean(t.view());
        assert!((&s.mu[0] - &expected).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn style_stats_zero_and_empty() {
        let z = vec![vec![Array3::zeros((4, 3, 3))]];
        assert!(compute_style_stats(&z).unwrap().mu[0].iter().all(|v| *v == 0.0));
        assert!(compute_style_stats(&[]).is_err());
    }

    #[test]
    fn style_stats_nested_loop_oracle() {
        let mut r = rng(1);
        let batch: Vec<TappedFeatures> = (0..2)
            .map(|_| vec![Array3::from_shape_simple_fn((3, 2, 2), || r.random_range(-2.0..2.0))])
            .collect();
        let got = compute_style_stats(&batch).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for b in &batch {
                for y in 0..2 {
                    for x in 0..2 {
                        acc += b[0][[c, y, x]];
                    }
                }
            }
            assert!((got.mu[0][c] - acc / 8.0).abs() < 1e-14);
        }
    }

    fn saturated(bias: f64) -> (VatParams, StyleStats) {
        let mut p = VatParams::init(&[3, 5], 8, 4, 1.0, &mut rng(2)).unwrap();
        p.fc2.weight.fill(0.0);
        p.fc2.bias.fill(bias);
        let stats = StyleStats {
            mu: vec![array![1.0, -2.0, 0.5], array![0.3, 0.1, -0.7, 2.0, 1.5]],
        };
        (p, stats)
    }

    #[test]
    fn mask_closed_passes_style_through() {
        let (p, stats) = saturated(-20.0);
        let tokens = visual_attentive_tokens(&stats, &p).unwrap();
        for l in 0..2 {
            let s = p.projectors[l].forward(stats.mu[l].view());
            assert!((&tokens.row(l) - &s).iter().all(|d| d.abs() < 1e-6));
        }
    }

    #[test]
    fn mask_open_doubles_style() {
        let (p, stats) = saturated(20.0);
        let tokens = visual_attentive_tokens(&stats, &p).unwrap();
        for l in 0..2 {
            let s = p.projectors[l].forward(stats.mu[l].view());
            assert!((&tokens.row(l) - &(&s * 2.0)).iter().all(|d| d.abs() < 1e-6));
        }
    }

    #[test]
    fn attention_elementwise_oracle() {
        let s = array![0.5, -1.5, 2.0, 0.0];
        let a = array![0.1, 0.9, 0.5, 0.3];
        let got = apply_attention(a.view(), s.view());
        for i in 0..4 {
            assert_eq!(got[i], a[i] * s[i] + s[i]);
        }
    }

    #[test]
    fn vat_dimension_mismatch() {
        let (p, mut stats) = saturated(0.0);
        stats.mu[1] = array![1.0, 2.0];
        assert!(visual_attentive_tokens(&stats, &p).is_err());
        stats.mu.pop();
        assert!(visual_attentive_tokens(&stats, &p).is_err());
    }

    #[test]
    fn ape_is_mean_and_symmetric() {
        let mut r = rng(3);
        let a = Array2::from_shape_simple_fn((4, 8), || r.random_range(-1.0..1.0));
        let b = Array2::from_shape_simple_fn((4, 8), || r.random_range(-1.0..1.0));
        assert_eq!(ape(a.view(), a.view()).unwrap(), a);
        assert_eq!(ape(a.view(), b.view()).unwrap(), ape(b.view(), a.view()).unwrap());
        let m = ape(a.view(), b.view()).unwrap();
        for ((x, y), z) in a.iter().zip(b.iter()).zip(m.iter()) {
            assert_eq!(*z, (x + y) / 2.0);
        }
        assert!(ape(a.view(), b.slice(s![..3, ..])).is_err());
    }

    #[test]
    fn probs_closed_form() {
        // cos sims [1, 0] at temperature 0.5
        let img = array![[1.0, 0.0]];
        let cls = array![[2.0, 0.0], [0.0, 3.0]];
        let p = predict_probs(img.view(), cls.view(), 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((p[[0, 0]] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[[0, 1]] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[[0, 0]] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn probs_uniform_for_identical_classes() {
        let img = array![[0.3, -0.2, 0.9]];
        let cls = array![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]];
        let p = predict_probs(img.view(), cls.view(), 0.01).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn classifier_rejects_bad_inputs() {
        let img = array![[0.0, 0.0]];
        let cls = array![[1.0, 0.0]];
        assert!(predict_probs(img.view(), cls.view(), 1.0).is_err());
        assert!(predict_probs(cls.view(), cls.view(), 0.0).is_err());
    }

    #[test]
    fn classify_backward_matches_finite_difference() {
        let mut r = rng(4);
        let img = Array2::from_shape_simple_fn((3, 5), || r.random_range(-1.0..1.0));
        let cls = Array2::from_shape_simple_fn((4, 5), || r.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((3, 4), || r.random_range(-1.0..1.0));
        let f = |c: &Array2<f64>| (classify(img.view(), c.view(), 0.3).unwrap().logits * &w).sum();
        let out = classify(img.view(), cls.view(), 0.3).unwrap();
        let g = classify_backward(&out, w.view());
        let h = 1e-6;
        for idx in [[0, 0], [2, 3], [3, 4]] {
            let mut p = cls.clone();
            p[idx] += h;
            let mut m = cls.clone();
            m[idx] -= h;
            assert!(((f(&p) - f(&m)) / (2.0 * h) - g[idx]).abs() < 1e-7);
        }
    }
}
