//! Small deterministic backbone for tests and desk-scale runs.
//!
//! Vision: an 8x8 patchifying stem and two convolutional blocks, tapped at
//! four points, global-average-pooled and projected to `d_v = 32`.
//! Text: hashed word embeddings of width `d_t = 16`, mean-pooled over the
//! sequence and passed through a `Linear-tanh-Linear` head to `d_v`.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Backbone, PromptTemplate, VisionOutput};
use crate::error::{CsawError, Result};
use crate::imageops::{derive_seed, ImageTensor};
use crate::nn::{avg_pool2, conv2d, spatial_mean, Linear};

pub const STANDIN_EMBED_DIM: usize = 32;
pub const STANDIN_TOKEN_DIM: usize = 16;
pub const STANDIN_TEXT_HIDDEN: usize = 64;
pub const STANDIN_TAPS: [usize; 4] = [16, 16, 32, 32];
pub const STANDIN_TEMPERATURE: f64 = 0.01;
const MAX_TEXT_LEN: usize = 77;
const TEXT_GAIN: f64 = 3.0;

#[derive(Debug, Clone)]
struct Conv {
    weight: Array4<f64>,
    bias: Array1<f64>,
}

impl Conv {
    fn new(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Self {
        let w = Normal::new(0.0, 1.0 / ((cin * k * k) as f64).sqrt()).unwrap();
        let b = Normal::new(0.0, 0.1).unwrap();
        Conv {
            weight: Array4::from_shape_simple_fn((cout, cin, k, k), || w.sample(rng)),
            bias: Array1::from_shape_simple_fn(cout, || b.sample(rng)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StandinBackbone {
    seed: u64,
    temperature: f64,
    stem: Conv,
    block1: Conv,
    block2a: Conv,
    block2b: Conv,
    vision_proj: Array2<f64>,
    text_hidden: Linear,
    text_out: Linear,
}

impl StandinBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x57a9d]));
        let stem = Conv::new(&mut rng, 16, 3, 8);
        let block1 = Conv::new(&mut rng, 16, 16, 3);
        let block2a = Conv::new(&mut rng, 32, 16, 3);
        let block2b = Conv::new(&mut rng, 32, 32, 3);
        let n = Normal::new(0.0, 1.0 / (STANDIN_EMBED_DIM as f64).sqrt()).unwrap();
        let vision_proj =
            Array2::from_shape_simple_fn((STANDIN_EMBED_DIM, 32), || n.sample(&mut rng));
        let text_hidden = Linear::normal(
            STANDIN_TEXT_HIDDEN,
            STANDIN_TOKEN_DIM,
            TEXT_GAIN / (STANDIN_TOKEN_DIM as f64).sqrt(),
            &mut rng,
        );
        let text_out = Linear::normal(
            STANDIN_EMBED_DIM,
            STANDIN_TEXT_HIDDEN,
            1.0 / (STANDIN_TEXT_HIDDEN as f64).sqrt(),
            &mut rng,
        );
        StandinBackbone {
            seed,
            temperature: STANDIN_TEMPERATURE,
            stem,
            block1,
            block2a,
            block2b,
            vision_proj,
            text_hidden,
            text_out,
        }
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn text_hidden(&self) -> &Linear {
        &self.text_hidden
    }

    pub fn text_out(&self) -> &Linear {
        &self.text_out
    }

    /// Mutable access to one named parameter tensor. Only meant for audits
    /// that check the digest notices a changed weight.
    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = match name {
            "stem.weight" => self.stem.weight.as_slice_mut(),
            "stem.bias" => self.stem.bias.as_slice_mut(),
            "block1.weight" => self.block1.weight.as_slice_mut(),
            "block1.bias" => self.block1.bias.as_slice_mut(),
            "block2a.weight" => self.block2a.weight.as_slice_mut(),
            "block2a.bias" => self.block2a.bias.as_slice_mut(),
            "block2b.weight" => self.block2b.weight.as_slice_mut(),
            "block2b.bias" => self.block2b.bias.as_slice_mut(),
            "vision_proj" => self.vision_proj.as_slice_mut(),
            "text_hidden.weight" => self.text_hidden.weight.as_slice_mut(),
            "text_hidden.bias" => self.text_hidden.bias.as_slice_mut(),
            "text_out.weight" => self.text_out.weight.as_slice_mut(),
            "text_out.bias" => self.text_out.bias.as_slice_mut(),
            _ => None,
        };
        t
    }

    /// Deterministic embedding of one word (or marker) in token space.
    pub fn word_vector(&self, word: &str) -> Array1<f64> {
        let digest = Sha256::digest(word.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, u64::from_le_bytes(b)]));
        let n = Normal::new(0.0, 1.0).unwrap();
        Array1::from_shape_simple_fn(STANDIN_TOKEN_DIM, || n.sample(&mut rng))
    }

    fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if !ch.is_whitespace() && ch != '_' {
                    out.push(ch.to_string());
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    fn text_hidden_act(&self, tokens: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if tokens.ncols() != STANDIN_TOKEN_DIM || tokens.nrows() == 0 {
            return Err(CsawError::Shape(format!(
                "stand-in text encoder expects (L>0, {STANDIN_TOKEN_DIM}) tokens, got {:?}",
                tokens.dim()
            )));
        }
        if tokens.nrows() > MAX_TEXT_LEN {
            return Err(CsawError::SequenceTooLong {
                class: "<sequence>".into(),
                len: tokens.nrows(),
                limit: MAX_TEXT_LEN,
            });
        }
        let pooled = tokens.mean_axis(Axis(0)).unwrap();
        let hidden = self.text_hidden.forward(pooled.view()).mapv(f64::tanh);
        Ok((pooled, hidden))
    }
}

impl Backbone for StandinBackbone {
    fn name(&self) -> &str {
        "standin"
    }

    fn embed_dim(&self) -> usize {
        STANDIN_EMBED_DIM
    }

    fn token_dim(&self) -> usize {
        STANDIN_TOKEN_DIM
    }

    fn tap_channels(&self) -> Vec<usize> {
        STANDIN_TAPS.to_vec()
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn max_text_len(&self) -> usize {
        MAX_TEXT_LEN
    }

    fn token_scale(&self) -> f64 {
        1.0
    }

    fn encode_image(&self, x: &ImageTensor, taps: &[usize]) -> Result<VisionOutput> {
        if let Some(&bad) = taps.iter().find(|&&t| t >= STANDIN_TAPS.len()) {
            return Err(CsawError::Config(format!(
                "stand-in backbone has {} tap points, asked for {bad}",
                STANDIN_TAPS.len()
            )));
        }
        let relu = |a: ndarray::Array3<f64>| a.mapv(|v| v.max(0.0));
        let t0 = relu(conv2d(x.view(), &self.stem.weight, &self.stem.bias, 8, 0));
        let t1 = relu(conv2d(t0.view(), &self.block1.weight, &self.block1.bias, 1, 1));
        let p1 = avg_pool2(t1.view());
        let t2 = relu(conv2d(p1.view(), &self.block2a.weight, &self.block2a.bias, 1, 1));
        let p2 = avg_pool2(t2.view());
        let t3 = relu(conv2d(p2.view(), &self.block2b.weight, &self.block2b.bias, 1, 1));
        let embedding = self.vision_proj.dot(&spatial_mean(t3.view()));
        let all = [t0, t1, t2, t3];
        Ok(VisionOutput {
            embedding,
            taps: taps.iter().map(|&t| all[t].clone()).collect(),
        })
    }

    fn token_embed(&self, text: &str) -> Result<Array2<f64>> {
        let words = Self::words(text);
        let rows: Vec<Array1<f64>> = words.iter().map(|w| self.word_vector(w)).collect();
        let mut out = Array2::zeros((rows.len(), STANDIN_TOKEN_DIM));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        Ok(out)
    }

    fn prompt_template(&self, class_name: &str, context_len: usize) -> Result<PromptTemplate> {
        let class = self.token_embed(class_name)?;
        if class.nrows() == 0 {
            return Err(CsawError::InvalidArgument(format!(
                "class name `{class_name}` has no tokens"
            )));
        }
        let len = 1 + context_len + class.nrows() + 2;
        let mut tokens = Array2::zeros((len, STANDIN_TOKEN_DIM));
        tokens.row_mut(0).assign(&self.word_vector("<start>"));
        let placeholder = self.word_vector("x");
        for i in 0..context_len {
            tokens.row_mut(1 + i).assign(&placeholder);
        }
        for (i, r) in class.rows().into_iter().enumerate() {
            tokens.row_mut(1 + context_len + i).assign(&r);
        }
        tokens.row_mut(len - 2).assign(&self.word_vector("."));
        tokens.row_mut(len - 1).assign(&self.word_vector("<end>"));
        Ok(PromptTemplate {
            class_name: class_name.to_string(),
            tokens,
            context_slots: 1..1 + context_len,
        })
    }

    fn encode_text(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let (_, hidden) = self.text_hidden_act(tokens)?;
        Ok(self.text_out.forward(hidden.view()))
    }

    fn encode_text_vjp(
        &self,
        tokens: ArrayView2<'_, f64>,
        grad: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let (_, hidden) = self.text_hidden_act(tokens)?;
        let g_hidden = self.text_out.weight.t().dot(&grad);
        let g_pre = &g_hidden * &hidden.mapv(|h| 1.0 - h * h);
        let g_pooled = self.text_hidden.weight.t().dot(&g_pre);
        let l = tokens.nrows();
        let mut out = Array2::zeros(tokens.raw_dim());
        for mut row in out.rows_mut() {
            row.assign(&(&g_pooled / l as f64));
        }
        Ok(out)
    }

    fn visit_parameters(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("stem.weight", self.stem.weight.as_slice().unwrap());
        f("stem.bias", self.stem.bias.as_slice().unwrap());
        f("block1.weight", self.block1.weight.as_slice().unwrap());
        f("block1.bias", self.block1.bias.as_slice().unwrap());
        f("block2a.weight", self.block2a.weight.as_slice().unwrap());
        f("block2a.bias", self.block2a.bias.as_slice().unwrap());
        f("block2b.weight", self.block2b.weight.as_slice().unwrap());
        f("block2b.bias", self.block2b.bias.as_slice().unwrap());
        f("vision_proj", self.vision_proj.as_slice().unwrap());
        f("text_hidden.weight", self.text_hidden.weight.as_slice().unwrap());
        f("text_hidden.bias", self.text_hidden.bias.as_slice().unwrap());
        f("text_out.weight", self.text_out.weight.as_slice().unwrap());
        f("text_out.bias", self.text_out.bias.as_slice().unwrap());
        // Word vectors are derived from the seed, so it is part of the digest.
        f("word_seed", &[(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64]);
    }
}
