//! Checkpoint container: a safetensors file whose metadata carries a JSON
//! header and whose tensors are the trainable parameters (and optimizer
//! state) as little-endian f64 blobs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{CsawError, Result};
use crate::losses::LossWeights;
use crate::model::{ModelSpec, TrainableParams};
use crate::trainer::TrainConfig;

pub const FORMAT: &str = "csaw-checkpoint-1";
const HEADER_KEY: &str = "csaw";
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub backbone: String,
    pub backbone_digest: String,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub spec: ModelSpec,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub class_names: Vec<String>,
    /// Random streams are derived from `(train.seed, epoch, sample)`, so the
    /// next epoch index is the whole generator state.
    pub rng_next_epoch: usize,
    /// Free-form run configuration snapshot.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: TrainableParams,
    pub momentum: Option<TrainableParams>,
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, s, t)| (n, s, to_bytes(t)))
            .collect();
        if let Some(m) = &self.momentum {
            blobs.extend(
                m.tensors()
                    .into_iter()
                    .map(|(n, s, t)| (format!("{MOMENTUM_PREFIX}{n}"), s, to_bytes(t))),
            );
        }
        let views = blobs
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F64, s.clone(), b)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| CsawError::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&self.header)?)]);
        safetensors::tensor::serialize(views, Some(meta)).map_err(|e| CsawError::Checkpoint(e.to_string()))
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| CsawError::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CsawError::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| CsawError::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| CsawError::io(path, e))?;
        tmp.persist(path).map_err(|e| CsawError::io(path, e.error))?;
        Ok(())
    }

    pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
        let bytes = fs::read(path).map_err(|e| CsawError::io(path, e))?;
        header_of(&bytes)
    }

    /// Loads and checks the file against the backbone it will run on.
    pub fn load(path: &Path, backbone: &dyn Backbone) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CsawError::io(path, e))?;
        Self::from_bytes(&bytes, backbone)
    }

    pub fn from_bytes(bytes: &[u8], backbone: &dyn Backbone) -> Result<Self> {
        let header = header_of(bytes)?;
        if header.format != FORMAT {
            return Err(CsawError::Checkpoint(format!("unsupported format `{}`", header.format)));
        }
        let digest = backbone.checksum_parameters();
        if header.backbone != backbone.name() || header.backbone_digest != digest {
            return Err(CsawError::Checkpoint(format!(
                "checkpoint was written for backbone `{}` ({}), loaded backbone is `{}` ({digest})",
                header.backbone,
                header.backbone_digest,
                backbone.name()
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| CsawError::Checkpoint(e.to_string()))?;
        let template = TrainableParams::init(backbone, &header.spec, 0)?;
        let params = fill(&template, &st, "")?;
        let has_momentum = st.names().iter().any(|n| n.starts_with(MOMENTUM_PREFIX));
        let momentum = if has_momentum {
            Some(fill(&template, &st, MOMENTUM_PREFIX)?)
        } else {
            None
        };
        let expected = template.tensors().len() * if has_momentum { 2 } else { 1 };
        if st.len() != expected {
            return Err(CsawError::Checkpoint(format!(
                "{} tensors stored, {expected} expected",
                st.len()
            )));
        }
        Ok(Checkpoint { header, params, momentum })
    }
}

fn header_of(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| CsawError::Checkpoint(e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| CsawError::Checkpoint("missing header".into()))?;
    Ok(serde_json::from_str(raw)?)
}

fn fill(template: &TrainableParams, st: &SafeTensors<'_>, prefix: &str) -> Result<TrainableParams> {
    let shapes: Vec<(String, Vec<usize>)> = template.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let mut out = template.clone();
    for ((name, dst), (_, shape)) in out.tensors_mut().into_iter().zip(shapes) {
        let key = format!("{prefix}{name}");
        let view = st
            .tensor(&key)
            .map_err(|_| CsawError::Checkpoint(format!("missing tensor `{key}`")))?;
        if view.dtype() != Dtype::F64 || view.shape() != shape.as_slice() {
            return Err(CsawError::Checkpoint(format!(
                "tensor `{key}` is {:?} {:?}, expected F64 {shape:?}",
                view.dtype(),
                view.shape()
            )));
        }
        for (d, c) in dst.iter_mut().zip(view.data().chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    Ok(out)
}
