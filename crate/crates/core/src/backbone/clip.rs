//! CLIP ViT backbone (ViT-B/16 by default) loaded from the Hugging Face
//! `model.safetensors` layout, evaluated in f64.
//!
//! Only the forward pass of the vision tower is provided. The text tower
//! also has an input-gradient (VJP) pass so prompt tokens can be learned.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::tokenizer::{BpeTokenizer, END_TOKEN, START_TOKEN};
use super::{Backbone, PromptTemplate, VisionOutput};
use crate::error::{CsawError, Result};
use crate::imageops::ImageTensor;
use crate::nn::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub embed_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub vision_mlp: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_mlp: usize,
    pub context_length: usize,
    pub vocab_size: usize,
}

impl ClipConfig {
    pub fn vit_b16() -> Self {
        ClipConfig {
            embed_dim: 512,
            image_size: 224,
            patch_size: 16,
            vision_width: 768,
            vision_layers: 12,
            vision_heads: 12,
            vision_mlp: 3072,
            text_width: 512,
            text_layers: 12,
            text_heads: 8,
            text_mlp: 2048,
            context_length: 77,
            vocab_size: 49408,
        }
    }

    /// Reads the `text_config` / `vision_config` / `projection_dim` fields of
    /// a Hugging Face `config.json`; missing fields fall back to ViT-B/16.
    pub fn from_hf_json(json: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(json)?;
        let d = Self::vit_b16();
        let get = |section: &str, key: &str, default: usize| {
            v.get(section)
                .and_then(|s| s.get(key))
                .and_then(|x| x.as_u64())
                .map_or(default, |x| x as usize)
        };
        Ok(ClipConfig {
            embed_dim: v
                .get("projection_dim")
                .and_then(|x| x.as_u64())
                .map_or(d.embed_dim, |x| x as usize),
            image_size: get("vision_config", "image_size", d.image_size),
            patch_size: get("vision_config", "patch_size", d.patch_size),
            vision_width: get("vision_config", "hidden_size", d.vision_width),
            vision_layers: get("vision_config", "num_hidden_layers", d.vision_layers),
            vision_heads: get("vision_config", "num_attention_heads", d.vision_heads),
            vision_mlp: get("vision_config", "intermediate_size", d.vision_mlp),
            text_width: get("text_config", "hidden_size", d.text_width),
            text_layers: get("text_config", "num_hidden_layers", d.text_layers),
            text_heads: get("text_config", "num_attention_heads", d.text_heads),
            text_mlp: get("text_config", "intermediate_size", d.text_mlp),
            context_length: get("text_config", "max_position_embeddings", d.context_length),
            vocab_size: get("text_config", "vocab_size", d.vocab_size),
        })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Every tensor name the loader expects, with its shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut tower = |prefix: &str, layers: usize, width: usize, mlp: usize| {
            for i in 0..layers {
                let p = format!("{prefix}.encoder.layers.{i}");
                for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                    out.push((format!("{p}.self_attn.{proj}.weight"), vec![width, width]));
                    out.push((format!("{p}.self_attn.{proj}.bias"), vec![width]));
                }
                for ln in ["layer_norm1", "layer_norm2"] {
                    out.push((format!("{p}.{ln}.weight"), vec![width]));
                    out.push((format!("{p}.{ln}.bias"), vec![width]));
                }
                out.push((format!("{p}.mlp.fc1.weight"), vec![mlp, width]));
                out.push((format!("{p}.mlp.fc1.bias"), vec![mlp]));
                out.push((format!("{p}.mlp.fc2.weight"), vec![width, mlp]));
                out.push((format!("{p}.mlp.fc2.bias"), vec![width]));
            }
        };
        tower("text_model", self.text_layers, self.text_width, self.text_mlp);
        tower("vision_model", self.vision_layers, self.vision_width, self.vision_mlp);
        let (tw, vw, g) = (self.text_width, self.vision_width, self.grid());
        out.extend([
            ("text_model.embeddings.token_embedding.weight".into(), vec![self.vocab_size, tw]),
            ("text_model.embeddings.position_embedding.weight".into(), vec![self.context_length, tw]),
            ("text_model.final_layer_norm.weight".into(), vec![tw]),
            ("text_model.final_layer_norm.bias".into(), vec![tw]),
            ("text_projection.weight".into(), vec![self.embed_dim, tw]),
            ("vision_model.embeddings.class_embedding".into(), vec![vw]),
            (
                "vision_model.embeddings.patch_embedding.weight".into(),
                vec![vw, 3, self.patch_size, self.patch_size],
            ),
            ("vision_model.embeddings.position_embedding.weight".into(), vec![g * g + 1, vw]),
            ("vision_model.pre_layrnorm.weight".into(), vec![vw]),
            ("vision_model.pre_layrnorm.bias".into(), vec![vw]),
            ("vision_model.post_layernorm.weight".into(), vec![vw]),
            ("vision_model.post_layernorm.bias".into(), vec![vw]),
            ("visual_projection.weight".into(), vec![self.embed_dim, vw]),
            ("logit_scale".into(), vec![]),
        ]);
        out
    }
}

/// Row-wise affine map: `y = x Wᵀ + b`, weight `(out, in)`.
#[derive(Debug, Clone)]
struct Dense {
    weight: Array2<f64>,
    bias: Option<Array1<f64>>,
}

impl Dense {
    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    fn backward_input(&self, g: ArrayView2<'_, f64>) -> Array2<f64> {
        g.dot(&self.weight)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LnCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.dot(&row) / n;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    fn backward_input(&self, cache: &LnCache, g: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = g.ncols() as f64;
        let mut out = Array2::zeros(g.raw_dim());
        for (i, mut o) in out.rows_mut().into_iter().enumerate() {
            let gh = &g.row(i) * &self.gamma;
            let xh = cache.xhat.row(i);
            let m1 = gh.sum() / n;
            let m2 = gh.dot(&xh) / n;
            o.assign(&((&gh - m1 - &(&xh * m2)) * cache.inv_std[i]));
        }
        out
    }
}

fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + 1.702 * x * s * (1.0 - s)
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
    heads: usize,
}

struct BlockCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ln2: LnCache,
    pre_act: Array2<f64>,
}

impl Block {
    fn forward(&self, x: ArrayView2<'_, f64>, causal: bool) -> (Array2<f64>, BlockCache) {
        let (l, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (h1, ln1) = self.ln1.forward(x);
        let q = self.q.forward(h1.view());
        let k = self.k.forward(h1.view());
        let v = self.v.forward(h1.view());
        let mut concat = Array2::zeros((l, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                if causal {
                    row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
                }
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|z| (z - m).exp());
                let sum = row.sum();
                row /= sum;
            }
            concat.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let x_mid = &x + &self.o.forward(concat.view());
        let (h2, ln2) = self.ln2.forward(x_mid.view());
        let pre_act = self.fc1.forward(h2.view());
        let act = pre_act.mapv(quick_gelu);
        let out = &x_mid + &self.fc2.forward(act.view());
        (
            out,
            BlockCache {
                ln1,
                q,
                k,
                v,
                probs,
                ln2,
                pre_act,
            },
        )
    }

    fn backward_input(&self, c: &BlockCache, g: ArrayView2<'_, f64>) -> Array2<f64> {
        let (l, d) = g.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let g_act = self.fc2.backward_input(g);
        let g_pre = &g_act * &c.pre_act.mapv(quick_gelu_grad);
        let g_h2 = self.fc1.backward_input(g_pre.view());
        let g_mid = &g + &self.ln2.backward_input(&c.ln2, g_h2.view());
        let g_concat = self.o.backward_input(g_mid.view());
        let mut gq = Array2::zeros((l, d));
        let mut gk = Array2::zeros((l, d));
        let mut gv = Array2::zeros((l, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let d_o = g_concat.slice(cols);
            gv.slice_mut(cols).assign(&p.t().dot(&d_o));
            let dp = d_o.dot(&c.v.slice(cols).t());
            let mut ds = &dp * p;
            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                let dot = row.sum();
                row.zip_mut_with(&p.row(i), |r, &pi| *r -= pi * dot);
            }
            ds *= scale;
            gq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            gk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let g_h1 = self.q.backward_input(gq.view())
            + self.k.backward_input(gk.view())
            + self.v.backward_input(gv.view());
        &g_mid + &self.ln1.backward_input(&c.ln1, g_h1.view())
    }
}

pub struct ClipBackbone {
    config: ClipConfig,
    tokenizer: BpeTokenizer,
    tensors: Vec<(String, Array1<f64>)>,
    token_embedding: Array2<f64>,
    text_pos: Array2<f64>,
    text_blocks: Vec<Block>,
    final_ln: LayerNorm,
    text_projection: Array2<f64>,
    class_embedding: Array1<f64>,
    patch_weight: Array2<f64>,
    vision_pos: Array2<f64>,
    pre_ln: LayerNorm,
    vision_blocks: Vec<Block>,
    post_ln: LayerNorm,
    visual_projection: Array2<f64>,
    temperature: f64,
    token_scale: f64,
}

impl std::fmt::Debug for ClipBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClipBackbone").field("config", &self.config).finish()
    }
}

fn to_f64(view: &safetensors::tensor::TensorView<'_>) -> Result<Vec<f64>> {
    let data = view.data();
    let out = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        other => {
            return Err(CsawError::Config(format!("unsupported tensor dtype {other:?}")));
        }
    };
    Ok(out)
}

impl ClipBackbone {
    /// Loads `model.safetensors`, `vocab.json`, `merges.txt` and (optionally)
    /// `config.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let config = match std::fs::read_to_string(dir.join("config.json")) {
            Ok(s) => ClipConfig::from_hf_json(&s)?,
            Err(_) => ClipConfig::vit_b16(),
        };
        let weights_path = dir.join("model.safetensors");
        let bytes = std::fs::read(&weights_path).map_err(|e| CsawError::io(&weights_path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| CsawError::Config(format!("{}: {e}", weights_path.display())))?;
        let mut tensors = HashMap::new();
        for (name, shape) in config.parameter_shapes() {
            let view = st
                .tensor(&name)
                .map_err(|_| CsawError::Config(format!("checkpoint lacks tensor `{name}`")))?;
            let got: Vec<usize> = view.shape().to_vec();
            let numel: usize = shape.iter().product();
            if got.iter().product::<usize>() != numel.max(1) || (!shape.is_empty() && got != shape) {
                return Err(CsawError::Config(format!(
                    "tensor `{name}` has shape {got:?}, expected {shape:?}"
                )));
            }
            tensors.insert(name, to_f64(&view)?);
        }
        let tokenizer = BpeTokenizer::from_dir(dir)?;
        Self::from_tensors(config, tensors, tokenizer)
    }

    /// Assembles a backbone from flat f64 tensors keyed by checkpoint name.
    pub fn from_tensors(
        config: ClipConfig,
        mut tensors: HashMap<String, Vec<f64>>,
        tokenizer: BpeTokenizer,
    ) -> Result<Self> {
        let shapes = config.parameter_shapes();
        let mut flat = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let t = tensors
                .remove(name)
                .ok_or_else(|| CsawError::Config(format!("missing tensor `{name}`")))?;
            if t.len() != shape.iter().product::<usize>() {
                return Err(CsawError::Config(format!("tensor `{name}` has wrong size")));
            }
            flat.push((name.clone(), Array1::from(t)));
        }
        let lookup: HashMap<&str, &Array1<f64>> =
            flat.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let vec = |n: &str| lookup[n].clone();
        let mat = |n: &str, r: usize, c: usize| {
            lookup[n].clone().into_shape_with_order((r, c)).expect("checked size")
        };
        let ln = |p: &str, w: usize| LayerNorm {
            gamma: mat(&format!("{p}.weight"), 1, w).row(0).to_owned(),
            beta: vec(&format!("{p}.bias")),
        };
        let dense = |p: &str, out: usize, inp: usize| Dense {
            weight: mat(&format!("{p}.weight"), out, inp),
            bias: Some(vec(&format!("{p}.bias"))),
        };
        let blocks = |prefix: &str, layers: usize, w: usize, mlp: usize, heads: usize| {
            (0..layers)
                .map(|i| {
                    let p = format!("{prefix}.encoder.layers.{i}");
                    Block {
                        ln1: ln(&format!("{p}.layer_norm1"), w),
                        q: dense(&format!("{p}.self_attn.q_proj"), w, w),
                        k: dense(&format!("{p}.self_attn.k_proj"), w, w),
                        v: dense(&format!("{p}.self_attn.v_proj"), w, w),
                        o: dense(&format!("{p}.self_attn.out_proj"), w, w),
                        ln2: ln(&format!("{p}.layer_norm2"), w),
                        fc1: dense(&format!("{p}.mlp.fc1"), mlp, w),
                        fc2: dense(&format!("{p}.mlp.fc2"), w, mlp),
                        heads,
                    }
                })
                .collect::<Vec<_>>()
        };
        let c = &config;
        let (tw, vw, g, ps) = (c.text_width, c.vision_width, c.grid(), c.patch_size);
        let token_embedding = mat("text_model.embeddings.token_embedding.weight", c.vocab_size, tw);
        let token_scale =
            (token_embedding.iter().map(|v| v * v).sum::<f64>() / token_embedding.len() as f64).sqrt();
        let logit_scale = lookup["logit_scale"][0];
        let backbone = ClipBackbone {
            text_pos: mat("text_model.embeddings.position_embedding.weight", c.context_length, tw),
            text_blocks: blocks("text_model", c.text_layers, tw, c.text_mlp, c.text_heads),
            final_ln: ln("text_model.final_layer_norm", tw),
            text_projection: mat("text_projection.weight", c.embed_dim, tw),
            class_embedding: vec("vision_model.embeddings.class_embedding"),
            patch_weight: mat("vision_model.embeddings.patch_embedding.weight", vw, 3 * ps * ps),
            vision_pos: mat("vision_model.embeddings.position_embedding.weight", g * g + 1, vw),
            pre_ln: ln("vision_model.pre_layrnorm", vw),
            vision_blocks: blocks("vision_model", c.vision_layers, vw, c.vision_mlp, c.vision_heads),
            post_ln: ln("vision_model.post_layernorm", vw),
            visual_projection: mat("visual_projection.weight", c.embed_dim, vw),
            temperature: (-logit_scale).exp(),
            token_scale,
            token_embedding,
            tokenizer,
            tensors: Vec::new(),
            config,
        };
        Ok(ClipBackbone {
            tensors: flat,
            ..backbone
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    /// Replaces the pretrained logit temperature.
    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    fn token_rows(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.config.text_width));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(CsawError::Config(format!("token id {id} outside vocabulary")));
            }
            out.row_mut(i).assign(&self.token_embedding.row(id as usize));
        }
        Ok(out)
    }

    fn special(&self, tok: &str) -> Result<Array2<f64>> {
        let id = self.tokenizer.token_id(tok).expect("checked at construction");
        self.token_rows(&[id])
    }

    fn text_forward(
        &self,
        tokens: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Vec<BlockCache>, LnCache)> {
        let l = tokens.nrows();
        if tokens.ncols() != self.config.text_width || l == 0 {
            return Err(CsawError::Shape(format!(
                "text encoder expects (L, {}) tokens, got {:?}",
                self.config.text_width,
                tokens.dim()
            )));
        }
        if l > self.config.context_length {
            return Err(CsawError::SequenceTooLong {
                class: "<sequence>".into(),
                len: l,
                limit: self.config.context_length,
            });
        }
        // Causal attention: the end token only sees earlier positions, so
        // the sequence need not be padded to the full context length.
        let mut x = &tokens + &self.text_pos.slice(s![..l, ..]);
        let mut caches = Vec::with_capacity(self.text_blocks.len());
        for b in &self.text_blocks {
            let (y, c) = b.forward(x.view(), true);
            caches.push(c);
            x = y;
        }
        let (y, ln) = self.final_ln.forward(x.slice(s![l - 1..l, ..]));
        Ok((self.text_projection.dot(&y.row(0)), caches, ln))
    }

    fn vision_forward(&self, x: &ImageTensor, taps: &[usize]) -> Result<VisionOutput> {
        let c = &self.config;
        if c.image_size != crate::imageops::IMAGE_SIDE {
            return Err(CsawError::Config(format!(
                "backbone expects {}px inputs",
                c.image_size
            )));
        }
        let (g, ps, vw) = (c.grid(), c.patch_size, c.vision_width);
        let img = x.view();
        let mut patches = Array2::zeros((g * g, 3 * ps * ps));
        for py in 0..g {
            for px in 0..g {
                let patch = img.slice(s![.., py * ps..(py + 1) * ps, px * ps..(px + 1) * ps]);
                patches
                    .row_mut(py * g + px)
                    .iter_mut()
                    .zip(patch.iter())
                    .for_each(|(d, s)| *d = *s);
            }
        }
        let mut h = Array2::zeros((g * g + 1, vw));
        h.row_mut(0).assign(&self.class_embedding);
        h.slice_mut(s![1.., ..]).assign(&patches.dot(&self.patch_weight.t()));
        h += &self.vision_pos;
        let (mut h, _) = self.pre_ln.forward(h.view());
        let mut tapped = Vec::with_capacity(taps.len());
        let mut wanted: Vec<Option<usize>> = vec![None; self.vision_blocks.len()];
        for (i, &t) in taps.iter().enumerate() {
            if t >= self.vision_blocks.len() {
                return Err(CsawError::Config(format!(
                    "backbone has {} tap points, asked for {t}",
                    self.vision_blocks.len()
                )));
            }
            wanted[t] = Some(i);
        }
        let mut slots: Vec<Option<Array3<f64>>> = vec![None; taps.len()];
        for (li, b) in self.vision_blocks.iter().enumerate() {
            h = b.forward(h.view(), false).0;
            if wanted[li].is_some() {
                let grid = Array3::from_shape_vec(
                    (vw, g, g),
                    h.slice(s![1.., ..]).t().iter().copied().collect(),
                )
                .expect("token grid");
                for (i, &t) in taps.iter().enumerate() {
                    if t == li {
                        slots[i] = Some(grid.clone());
                    }
                }
            }
        }
        tapped.extend(slots.into_iter().map(|s| s.expect("every tap filled")));
        let (cls, _) = self.post_ln.forward(h.slice(s![0..1, ..]));
        Ok(VisionOutput {
            embedding: self.visual_projection.dot(&cls.row(0)),
            taps: tapped,
        })
    }
}

impl Backbone for ClipBackbone {
    fn name(&self) -> &str {
        "clip"
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn token_dim(&self) -> usize {
        self.config.text_width
    }

    fn tap_channels(&self) -> Vec<usize> {
        vec![self.config.vision_width; self.config.vision_layers]
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn max_text_len(&self) -> usize {
        self.config.context_length
    }

    fn token_scale(&self) -> f64 {
        self.token_scale
    }

    fn encode_image(&self, x: &ImageTensor, taps: &[usize]) -> Result<VisionOutput> {
        self.vision_forward(x, taps)
    }

    fn token_embed(&self, text: &str) -> Result<Array2<f64>> {
        let ids = self.tokenizer.encode(text)?;
        self.token_rows(&ids)
    }

    fn prompt_template(&self, class_name: &str, context_len: usize) -> Result<PromptTemplate> {
        let class = self.token_embed(&format!("{class_name}."))?;
        let placeholder = self.token_embed("X")?;
        let start = self.special(START_TOKEN)?;
        let end = self.special(END_TOKEN)?;
        let len = 1 + context_len + class.nrows() + 1;
        let mut tokens = Array2::zeros((len, self.config.text_width));
        tokens.row_mut(0).assign(&start.row(0));
        for i in 0..context_len {
            tokens.row_mut(1 + i).assign(&placeholder.row(0));
        }
        tokens
            .slice_mut(s![1 + context_len..len - 1, ..])
            .assign(&class);
        tokens.row_mut(len - 1).assign(&end.row(0));
        Ok(PromptTemplate {
            class_name: class_name.to_string(),
            tokens,
            context_slots: 1..1 + context_len,
        })
    }

    fn encode_text(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.text_forward(tokens)?.0)
    }

    fn encode_text_vjp(
        &self,
        tokens: ArrayView2<'_, f64>,
        grad: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let (_, caches, ln) = self.text_forward(tokens)?;
        let l = tokens.nrows();
        let g_last = self.text_projection.t().dot(&grad).insert_axis(Axis(0));
        let mut g = Array2::zeros(tokens.raw_dim());
        g.slice_mut(s![l - 1..l, ..])
            .assign(&self.final_ln.backward_input(&ln, g_last.view()));
        for (b, c) in self.text_blocks.iter().zip(&caches).rev() {
            g = b.backward_input(c, g.view());
        }
        Ok(g)
    }

    fn visit_parameters(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, t) in &self.tensors {
            f(name, t.as_slice().expect("contiguous"));
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ClipConfig {
        ClipConfig {
            embed_dim: 6,
            image_size: 224,
            patch_size: 56,
            vision_width: 8,
            vision_layers: 3,
            vision_heads: 2,
            vision_mlp: 12,
            text_width: 8,
            text_layers: 2,
            text_heads: 2,
            text_mlp: 12,
            context_length: 16,
            vocab_size: 40,
        }
    }

    pub(crate) fn tiny_tokenizer() -> BpeTokenizer {
        let mut enc = HashMap::new();
        let mut toks: Vec<String> = ('a'..='z').map(|c| format!("{c}</w>")).collect();
        toks.extend([".</w>".to_string(), START_TOKEN.into(), END_TOKEN.into()]);
        toks.extend(('a'..='j').map(|c| c.to_string()));
        for (i, t) in toks.iter().enumerate() {
            enc.insert(t.clone(), i as u32);
        }
        BpeTokenizer::new(enc, &[]).unwrap()
    }

    pub(crate) fn tiny_tensors(config: &ClipConfig, seed: u64) -> HashMap<String, Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product::<usize>().max(1);
                let v = if name == "logit_scale" {
                    vec![100f64.ln()]
                } else if name.contains("norm") && name.ends_with("weight") {
                    (0..n).map(|_| 1.0 + 0.1 * rng.random_range(-1.0..1.0)).collect()
                } else {
                    (0..n).map(|_| 0.4 * rng.random_range(-1.0..1.0)).collect()
                };
                (name, v)
            })
            .collect()
    }

    fn tiny() -> ClipBackbone {
        let c = tiny_config();
        ClipBackbone::from_tensors(c.clone(), tiny_tensors(&c, 1), tiny_tokenizer()).unwrap()
    }

    #[test]
    fn temperature_from_logit_scale() {
        assert!((tiny().temperature() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn vision_shapes() {
        let b = tiny();
        let x = ImageTensor::zeros();
        let out = b.encode_image(&x, &[0, 2]).unwrap();
        assert_eq!(out.embedding.len(), 6);
        assert_eq!(out.taps.len(), 2);
        assert_eq!(out.taps[0].dim(), (8, 4, 4));
        assert!(b.encode_image(&x, &[3]).is_err());
    }

    #[test]
    fn prompt_layout() {
        let b = tiny();
        let t = b.prompt_template("ab", 3).unwrap();
        // start, 3 context, a, b, ., end
        assert_eq!(t.tokens.nrows(), 8);
        assert_eq!(t.context_slots, 1..4);
        assert_eq!(b.encode_text(t.tokens.view()).unwrap().len(), 6);
    }

    #[test]
    fn text_vjp_matches_finite_difference() {
        let b = tiny();
        let t = b.prompt_template("cab", 2).unwrap().tokens;
        let g = Array1::from(vec![0.3, -1.0, 0.5, 0.2, 0.9, -0.4]);
        let vjp = b.encode_text_vjp(t.view(), g.view()).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                let mut tp = t.clone();
                tp[[r, c]] += h;
                let mut tm = t.clone();
                tm[[r, c]] -= h;
                let fd = (b.encode_text(tp.view()).unwrap().dot(&g)
                    - b.encode_text(tm.view()).unwrap().dot(&g))
                    / (2.0 * h);
                worst = worst.max((fd - vjp[[r, c]]).abs());
            }
        }
        assert!(worst < 1e-7, "worst abs error {worst}");
    }

    #[test]
    fn causal_prefix_is_independent_of_suffix() {
        // Appending tokens after the end position must not change earlier
        // activations, which is what lets us skip context padding.
        let b = tiny();
        let t = b.prompt_template("ab", 2).unwrap().tokens;
        let (_, c1, _) = b.text_forward(t.view()).unwrap();
        let mut longer = Array2::zeros((t.nrows() + 2, t.ncols()));
        longer.slice_mut(s![..t.nrows(), ..]).assign(&t);
        let (_, c2, _) = b.text_forward(longer.view()).unwrap();
        let q1 = &c1[1].q;
        let q2 = c2[1].q.slice(s![..t.nrows(), ..]);
        assert!((q1 - &q2).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn parameter_digest_stable() {
        assert_eq!(tiny().checksum_parameters(), tiny().checksum_parameters());
    }
}
