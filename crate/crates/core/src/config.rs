//! Flat dotted-key run configuration.
//!
//! Files are TOML documents whose keys are the dotted names listed in
//! [`KEYS`] (`loss.alpha = 0.7`, or the equivalent `[loss]` table).
//! Command-line overrides use the same names. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use crate::backbone::{Backbone, ClipBackbone, StandinBackbone};
use crate::error::{CsawError, Result};
use crate::losses::{DmMode, LossWeights};
use crate::model::{ModelSpec, ReconTarget};
use crate::trainer::TrainConfig;

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("prompt.context_length", "4", "number of learnable context vectors M"),
    ("prompt.init_text", "\"a photo of a\"", "context initialization text (random init if its token count differs from M)"),
    ("vat.reduction", "4", "bottleneck reduction r of the attention mask"),
    ("vat.tap_layers", "auto", "0-based tapped vision layers; auto picks M evenly spaced layers"),
    ("loss.alpha", "0.5", "weight of ssl + recon; 1 - alpha weights the diversity term"),
    ("loss.lambda_bt", "0.0051", "off-diagonal weight of the redundancy-reduction loss"),
    ("loss.dm_mode", "\"entropy\"", "diversity term: entropy | min_prob"),
    ("recon.target", "\"clean\"", "reconstruction target: clean | jumbled"),
    ("recon.seed_shape", "auto", "[C, h, w] reshape of the image embedding before up-convolution"),
    ("backbone.name", "\"standin\"", "standin | clip"),
    ("backbone.path", "\"\"", "directory with model.safetensors, vocab.json, merges.txt (clip)"),
    ("backbone.seed", "0", "weight seed of the stand-in backbone"),
    ("backbone.temperature", "auto", "logit temperature; auto uses the backbone's own"),
    ("train.epochs", "50", "training epochs"),
    ("train.lr", "0.0002", "SGD learning rate after the first epoch"),
    ("train.warmup_lr", "1e-7", "SGD learning rate for the first epoch"),
    ("train.batch_size", "4", "batch size (training and evaluation)"),
    ("train.shots", "16", "labeled samples per class"),
    ("train.momentum", "0.0", "SGD momentum"),
    ("train.weight_decay", "0.0", "L2 weight decay"),
    ("jigsaw.grid", "4", "patches per side; must divide 224"),
    ("jigsaw.non_identity", "false", "never draw the identity permutation"),
    ("seeds", "[1, 2, 3]", "run seeds"),
    ("task.source", "auto", "source dataset name (cd default: PatternNet)"),
    ("task.targets", "[]", "target dataset names (cd/ssmt; empty means all others)"),
    ("ssmt.shared_classes", "[]", "class names shared by every ssmt domain"),
    ("eval.max_per_class", "0", "cap on evaluated samples per class (0 = all)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub context_length: usize,
    pub init_text: String,
    pub reduction: usize,
    pub tap_layers: Option<Vec<usize>>,
    pub loss: LossWeights,
    pub recon_target: ReconTarget,
    pub seed_shape: Option<(usize, usize, usize)>,
    pub backbone_name: String,
    pub backbone_path: Option<PathBuf>,
    pub backbone_seed: u64,
    pub temperature: Option<f64>,
    /// `seed` inside is replaced per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub source: Option<String>,
    pub targets: Vec<String>,
    pub shared_classes: Option<Vec<String>>,
    pub max_per_class: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            context_length: 4,
            init_text: "a photo of a".into(),
            reduction: 4,
            tap_layers: None,
            loss: LossWeights::default(),
            recon_target: ReconTarget::Clean,
            seed_shape: None,
            backbone_name: "standin".into(),
            backbone_path: None,
            backbone_seed: 0,
            temperature: None,
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            source: None,
            targets: Vec::new(),
            shared_classes: None,
            max_per_class: None,
        }
    }
}

fn bad(key: &str, want: &str, v: &toml::Value) -> CsawError {
    CsawError::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_uint(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| bad(key, "a non-negative integer", v))
}

fn as_float(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number", v)),
    }
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "a string", v))
}

fn is_auto(v: &toml::Value) -> bool {
    v.as_str() == Some("auto")
}

fn as_uint_list(key: &str, v: &toml::Value) -> Result<Vec<u64>> {
    v.as_array()
        .ok_or_else(|| bad(key, "a list of integers", v))?
        .iter()
        .map(|x| as_uint(key, x))
        .collect()
}

fn as_str_list(key: &str, v: &toml::Value) -> Result<Vec<String>> {
    v.as_array()
        .ok_or_else(|| bad(key, "a list of strings", v))?
        .iter()
        .map(|x| as_str(key, x).map(str::to_string))
        .collect()
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses an override value: TOML syntax when it parses, a bare string
/// otherwise (so `prompt.init_text=a photo of a` works unquoted).
fn parse_override(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.merge_toml_str(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CsawError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn merge_toml_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CsawError::Config(format!("config parse error: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CsawError::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), &parse_override(v.trim()))
    }

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        match key {
            "prompt.context_length" => self.context_length = as_uint(key, v)? as usize,
            "prompt.init_text" => self.init_text = as_str(key, v)?.to_string(),
            "vat.reduction" => self.reduction = as_uint(key, v)? as usize,
            "vat.tap_layers" => {
                self.tap_layers = if is_auto(v) {
                    None
                } else {
                    Some(as_uint_list(key, v)?.into_iter().map(|x| x as usize).collect())
                }
            }
            "loss.alpha" => self.loss.alpha = as_float(key, v)?,
            "loss.lambda_bt" => self.loss.lambda_bt = as_float(key, v)?,
            "loss.dm_mode" => self.loss.dm_mode = as_str(key, v)?.parse::<DmMode>()?,
            "recon.target" => self.recon_target = as_str(key, v)?.parse()?,
            "recon.seed_shape" => {
                self.seed_shape = if is_auto(v) {
                    None
                } else {
                    match as_uint_list(key, v)?.as_slice() {
                        &[c, h, w] => Some((c as usize, h as usize, w as usize)),
                        _ => return Err(bad(key, "[C, h, w]", v)),
                    }
                }
            }
            "backbone.name" => self.backbone_name = as_str(key, v)?.to_string(),
            "backbone.path" => {
                let p = as_str(key, v)?;
                self.backbone_path = (!p.is_empty()).then(|| PathBuf::from(p));
            }
            "backbone.seed" => self.backbone_seed = as_uint(key, v)?,
            "backbone.temperature" => {
                self.temperature = if is_auto(v) { None } else { Some(as_float(key, v)?) }
            }
            "train.epochs" => self.train.epochs = as_uint(key, v)? as usize,
            "train.lr" => self.train.lr = as_float(key, v)?,
            "train.warmup_lr" => self.train.warmup_lr = as_float(key, v)?,
            "train.batch_size" => self.train.batch_size = as_uint(key, v)? as usize,
            "train.shots" => self.train.shots = as_uint(key, v)? as usize,
            "train.momentum" => self.train.momentum = as_float(key, v)?,
            "train.weight_decay" => self.train.weight_decay = as_float(key, v)?,
            "jigsaw.grid" => self.train.jigsaw_grid = as_uint(key, v)? as usize,
            "jigsaw.non_identity" => {
                self.train.non_identity = v.as_bool().ok_or_else(|| bad(key, "true or false", v))?
            }
            "seeds" => self.seeds = as_uint_list(key, v)?,
            "task.source" => {
                let s = as_str(key, v)?;
                self.source = (s != "auto" && !s.is_empty()).then(|| s.to_string());
            }
            "task.targets" => self.targets = as_str_list(key, v)?,
            "ssmt.shared_classes" => {
                let l = as_str_list(key, v)?;
                self.shared_classes = (!l.is_empty()).then_some(l);
            }
            "eval.max_per_class" => {
                let n = as_uint(key, v)? as usize;
                self.max_per_class = (n > 0).then_some(n);
            }
            other => {
                return Err(CsawError::Config(format!(
                    "unknown config key `{other}` (see --help for the list)"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(CsawError::Config("seeds must not be empty".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CsawError::Config(format!("backbone.temperature must be positive, got {t}")));
            }
        }
        match self.backbone_name.as_str() {
            "standin" => Ok(()),
            "clip" if self.backbone_path.is_some() => Ok(()),
            "clip" => Err(CsawError::Config("backbone.name = clip needs backbone.path".into())),
            other => Err(CsawError::Config(format!("unknown backbone `{other}` (standin | clip)"))),
        }
    }

    pub fn load_backbone(&self) -> Result<Arc<dyn Backbone>> {
        self.validate()?;
        Ok(match self.backbone_name.as_str() {
            "clip" => {
                let bb = ClipBackbone::load(self.backbone_path.as_deref().expect("validated"))?;
                Arc::new(match self.temperature {
                    Some(t) => bb.with_temperature(t),
                    None => bb,
                })
            }
            _ => {
                let bb = StandinBackbone::new(self.backbone_seed);
                Arc::new(match self.temperature {
                    Some(t) => bb.with_temperature(t),
                    None => bb,
                })
            }
        })
    }

    pub fn model_spec(&self, backbone: &dyn Backbone) -> Result<ModelSpec> {
        ModelSpec::resolve(
            backbone,
            self.context_length,
            &self.init_text,
            self.reduction,
            self.tap_layers.clone(),
            self.seed_shape,
            self.recon_target,
        )
    }

    /// Training settings for one seed.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// Every key with its effective value.
    pub fn to_flat(&self) -> BTreeMap<String, serde_json::Value> {
        let auto = |o: Option<serde_json::Value>| o.unwrap_or_else(|| json!("auto"));
        let t = &self.train;
        BTreeMap::from([
            ("prompt.context_length".into(), json!(self.context_length)),
            ("prompt.init_text".into(), json!(self.init_text)),
            ("vat.reduction".into(), json!(self.reduction)),
            ("vat.tap_layers".into(), auto(self.tap_layers.as_ref().map(|v| json!(v)))),
            ("loss.alpha".into(), json!(self.loss.alpha)),
            ("loss.lambda_bt".into(), json!(self.loss.lambda_bt)),
            ("loss.dm_mode".into(), json!(self.loss.dm_mode.to_string())),
            ("recon.target".into(), json!(self.recon_target.to_string())),
            ("recon.seed_shape".into(), auto(self.seed_shape.map(|(c, h, w)| json!([c, h, w])))),
            ("backbone.name".into(), json!(self.backbone_name)),
            ("backbone.path".into(), json!(self.backbone_path.as_ref().map_or(String::new(), |p| p.display().to_string()))),
            ("backbone.seed".into(), json!(self.backbone_seed)),
            ("backbone.temperature".into(), auto(self.temperature.map(|v| json!(v)))),
            ("train.epochs".into(), json!(t.epochs)),
            ("train.lr".into(), json!(t.lr)),
            ("train.warmup_lr".into(), json!(t.warmup_lr)),
            ("train.batch_size".into(), json!(t.batch_size)),
            ("train.shots".into(), json!(t.shots)),
            ("train.momentum".into(), json!(t.momentum)),
            ("train.weight_decay".into(), json!(t.weight_decay)),
            ("jigsaw.grid".into(), json!(t.jigsaw_grid)),
            ("jigsaw.non_identity".into(), json!(t.non_identity)),
            ("seeds".into(), json!(self.seeds)),
            ("task.source".into(), auto(self.source.as_ref().map(|s| json!(s)))),
            ("task.targets".into(), json!(self.targets)),
            ("ssmt.shared_classes".into(), json!(self.shared_classes.clone().unwrap_or_default())),
            ("eval.max_per_class".into(), json!(self.max_per_class.unwrap_or(0))),
        ])
    }
}

impl RunConfig {
    /// Rebuilds a config from the object written by [`RunConfig::to_flat`].
    pub fn from_flat(flat: &serde_json::Value) -> Result<Self> {
        let map = flat
            .as_object()
            .ok_or_else(|| CsawError::Config("stored run config is not an object".into()))?;
        let mut c = RunConfig::default();
        for (k, v) in map {
            let tv: toml::Value = serde_json::from_value(v.clone())
                .map_err(|e| CsawError::Config(format!("{k}: unreadable stored value ({e})")))?;
            c.set(k, &tv)?;
        }
        Ok(c)
    }

    /// The effective config as a TOML document, one dotted key per line.
    pub fn to_toml_string(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in self.to_flat() {
            let tv: toml::Value = serde_json::from_value(v)
                .map_err(|e| CsawError::Config(format!("{k}: cannot express as TOML ({e})")))?;
            out.push_str(&format!("{k} = {tv}\n"));
        }
        Ok(out)
    }
}

/// `--help` text listing every key and its default.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (file or --set key=value):\n");
    for (k, d, h) in KEYS {
        out.push_str(&format!("  {k:<width$}  default {d:<16} {h}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_toml_round_trip() {
        let mut c = RunConfig::default();
        c.apply_override("loss.alpha=0.7").unwrap();
        c.apply_override("seeds=[4, 5]").unwrap();
        c.apply_override("recon.seed_shape=[8, 2, 2]").unwrap();
        c.apply_override("ssmt.shared_classes=[\"a\", \"b\"]").unwrap();
        let flat = serde_json::to_value(c.to_flat()).unwrap();
        assert_eq!(RunConfig::from_flat(&flat).unwrap(), c);
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
    }

    #[test]
    fn defaults_match_key_table() {
        let flat = RunConfig::default().to_flat();
        assert_eq!(flat.len(), KEYS.len());
        for (k, d, _) in KEYS {
            let v = &flat[*k];
            let parsed = parse_override(d);
            let expected: serde_json::Value = serde_json::to_value(&parsed).unwrap();
            if let (Some(a), Some(b)) = (v.as_f64(), expected.as_f64()) {
                assert!((a - b).abs() < 1e-15, "{k}");
            } else {
                assert_eq!(v, &expected, "{k}");
            }
        }
    }

    #[test]
    fn toml_dotted_and_table_forms() {
        let a = RunConfig::from_toml_str("loss.alpha = 0.7\ntrain.epochs = 5\nseeds = [4]").unwrap();
        let b = RunConfig::from_toml_str("seeds = [4]\n[loss]\nalpha = 0.7\n[train]\nepochs = 5").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss.alpha, 0.7);
        assert_eq!(a.train.epochs, 5);
        assert_eq!(a.seeds, vec![4]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml_str("loss.beta = 1").unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("loss.beta"));
        assert!(RunConfig::default().apply_override("nope=1").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("prompt.init_text=a satellite photo of").unwrap();
        c.apply_override("vat.tap_layers=[0, 2]").unwrap();
        c.apply_override("recon.seed_shape=[8,2,2]").unwrap();
        c.apply_override("loss.dm_mode=min_prob").unwrap();
        c.apply_override("backbone.temperature=0.05").unwrap();
        assert_eq!(c.init_text, "a satellite photo of");
        assert_eq!(c.tap_layers, Some(vec![0, 2]));
        assert_eq!(c.seed_shape, Some((8, 2, 2)));
        assert_eq!(c.loss.dm_mode, DmMode::MinProb);
        assert_eq!(c.temperature, Some(0.05));
        assert!(c.apply_override("train.epochs=many").is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.loss.alpha = 1.5;
        assert!(c.validate().is_err());
        let c = RunConfig { backbone_name: "clip".into(), ..Default::default() };
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        for (k, _, _) in KEYS {
            assert!(h.contains(k));
        }
    }
}
