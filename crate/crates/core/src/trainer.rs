//! Optimization loop: per-batch jigsaw, dual encoding, prompt conditioning,
//! reconstruction, loss composition and plain SGD on the trainable heads.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::Backbone;
use crate::checkpoint::{Checkpoint, CheckpointHeader, FORMAT};
use crate::datahub::LabeledSet;
use crate::error::{CsawError, Result};
use crate::imageops::{derive_seed, sample_non_identity_permutation, sample_permutation, ImageTensor, PatchPermutation, IMAGE_SIDE};
use crate::losses::{LossReport, LossWeights};
use crate::model::{argmax_rows, CsawModel, PromptBank, TrainableParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Constant rate used for the first epoch.
    pub warmup_lr: f64,
    pub batch_size: usize,
    pub shots: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub jigsaw_grid: usize,
    pub non_identity: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 2e-4,
            warmup_lr: 1e-7,
            batch_size: 4,
            shots: 16,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 1,
            jigsaw_grid: 4,
            non_identity: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CsawError::Config("train.epochs must be at least 1".into()));
        }
        if !(self.warmup_lr > 0.0 && self.lr > self.warmup_lr && self.lr.is_finite()) {
            return Err(CsawError::Config(format!(
                "learning rates must satisfy lr > warmup_lr > 0 (lr {}, warmup_lr {})",
                self.lr, self.warmup_lr
            )));
        }
        if self.batch_size < 2 {
            return Err(CsawError::Config(
                "train.batch_size must be at least 2 (the redundancy-reduction loss standardizes over the batch)".into(),
            ));
        }
        if self.shots == 0 {
            return Err(CsawError::Config("train.shots must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(CsawError::Config(format!(
                "momentum must lie in [0, 1) and weight decay be non-negative (got {}, {})",
                self.momentum, self.weight_decay
            )));
        }
        if self.jigsaw_grid == 0 || IMAGE_SIDE % self.jigsaw_grid != 0 {
            return Err(CsawError::Config(format!(
                "jigsaw.grid {} must divide {IMAGE_SIDE}",
                self.jigsaw_grid
            )));
        }
        if self.non_identity && self.jigsaw_grid == 1 {
            return Err(CsawError::Config("jigsaw.non_identity needs a grid of at least 2".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= 1 {
            self.warmup_lr
        } else {
            self.lr
        }
    }

    /// Jigsaw permutation for one sample in one epoch.
    pub fn permutation(&self, epoch: usize, sample: usize) -> Result<PatchPermutation> {
        let seed = derive_seed(&[self.seed, epoch as u64, sample as u64]);
        if self.non_identity {
            sample_non_identity_permutation(self.jigsaw_grid, seed)
        } else {
            sample_permutation(self.jigsaw_grid, seed)
        }
    }

    /// Batches of item indices for a 1-based epoch. A trailing batch of one
    /// is folded into the previous batch.
    pub fn batches(&self, n: usize, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if n < 2 {
            return Err(CsawError::InvalidArgument(format!(
                "training needs at least 2 samples, got {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, epoch as u64, 0x5AFF]));
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(|c| c.to_vec()).collect();
        if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        Ok(batches)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub correct: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    /// Component-wise mean over the epoch's steps.
    pub loss: LossReport,
    /// Accuracy on the jumbled training inputs seen during the epoch.
    pub train_top1: f64,
    pub steps: usize,
}

/// Line-delimited JSON training log.
pub struct JsonlLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLog {
    /// Appends when `append` is set (resumed runs), truncates otherwise.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CsawError::io(dir, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| CsawError::io(path, e))?;
        Ok(JsonlLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &serde_json::Value) -> Result<()> {
        writeln!(self.out, "{record}").map_err(|e| CsawError::io(&self.path, e))?;
        self.out.flush().map_err(|e| CsawError::io(&self.path, e))
    }
}

pub struct Trainer {
    pub model: CsawModel,
    pub bank: PromptBank,
    pub weights: LossWeights,
    pub config: TrainConfig,
    momentum: Option<TrainableParams>,
    pub epochs_done: usize,
    pub steps_done: usize,
    /// Manifest sample indices presented to the optimizer so far.
    pub touched: BTreeSet<usize>,
    /// Echoed into checkpoints.
    pub run_config: serde_json::Value,
}

impl Trainer {
    pub fn new(model: CsawModel, bank: PromptBank, weights: LossWeights, config: TrainConfig) -> Result<Self> {
        weights.validate()?;
        config.validate()?;
        Ok(Trainer {
            model,
            bank,
            weights,
            config,
            momentum: None,
            epochs_done: 0,
            steps_done: 0,
            touched: BTreeSet::new(),
            run_config: serde_json::Value::Null,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, backbone: Arc<dyn Backbone>) -> Result<Self> {
        let h = ckpt.header;
        let model = CsawModel {
            backbone,
            spec: h.spec,
            params: ckpt.params,
        };
        let bank = model.prompt_bank(&h.class_names)?;
        let mut t = Trainer::new(model, bank, h.weights, h.train)?;
        t.momentum = ckpt.momentum;
        t.epochs_done = h.epoch;
        t.steps_done = h.step;
        t.run_config = h.run_config;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let bb = self.model.backbone.as_ref();
        Checkpoint {
            header: CheckpointHeader {
                format: FORMAT.to_string(),
                backbone: bb.name().to_string(),
                backbone_digest: bb.checksum_parameters(),
                epoch: self.epochs_done,
                step: self.steps_done,
                spec: self.model.spec.clone(),
                weights: self.weights,
                train: self.config.clone(),
                class_names: self.bank.class_names.clone(),
                rng_next_epoch: self.epochs_done + 1,
                run_config: self.run_config.clone(),
            },
            params: self.model.params.clone(),
            momentum: self.momentum.clone(),
        }
    }

    /// One forward/backward pass and one SGD update.
    pub fn train_step(
        &mut self,
        images: &[ImageTensor],
        labels: &[usize],
        perms: &[PatchPermutation],
        lr: f64,
    ) -> Result<StepOutcome> {
        let model = &self.model;
        let batch = model.encode_batch(images, perms, labels)?;
        let state = model.forward(&model.params, &batch, &self.bank, &self.weights)?;
        if let Some(c) = state.report.non_finite_component() {
            return Err(CsawError::NonFinite(format!(
                "loss component `{c}` at step {} ({:?})",
                self.steps_done + 1,
                state.report
            )));
        }
        let grads = model.backward(&model.params, &batch, &state, &self.weights, self.weights.coefficients())?;
        for (name, _, g) in grads.tensors() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CsawError::NonFinite(format!(
                    "gradient of `{name}` at step {}",
                    self.steps_done + 1
                )));
            }
        }
        let correct = argmax_rows(state.probs.view())
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        self.apply_sgd(&grads, lr);
        self.steps_done += 1;
        Ok(StepOutcome {
            report: state.report,
            correct,
            batch: labels.len(),
        })
    }

    fn apply_sgd(&mut self, grads: &TrainableParams, lr: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        if mu > 0.0 && self.momentum.is_none() {
            self.momentum = Some(grads.zeros_like());
        }
        let mut bufs: Vec<Option<&mut [f64]>> = match &mut self.momentum {
            Some(m) => m.tensors_mut().into_iter().map(|(_, t)| Some(t)).collect(),
            None => grads.tensors().iter().map(|_| None).collect(),
        };
        for (((_, p), (_, _, g)), buf) in self
            .model
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(bufs.iter_mut())
        {
            for i in 0..p.len() {
                let mut d = g[i] + wd * p[i];
                if let Some(m) = buf.as_deref_mut() {
                    m[i] = mu * m[i] + d;
                    d = m[i];
                }
                p[i] -= lr * d;
            }
        }
    }

    /// Runs the next epoch over `data`.
    pub fn run_epoch(&mut self, data: &LabeledSet, mut log: Option<&mut JsonlLog>) -> Result<EpochSummary> {
        let epoch = self.epochs_done + 1;
        let lr = self.config.lr_for_epoch(epoch);
        let mut sum = LossReport { ce: 0.0, ssl: 0.0, recon: 0.0, dm: 0.0, total: 0.0 };
        let mut correct = 0;
        let mut seen = 0;
        let batches = self.config.batches(data.len(), epoch)?;
        for idx in &batches {
            let images = data.load(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.items[i].label).collect();
            let perms = idx
                .iter()
                .map(|&i| self.config.permutation(epoch, i))
                .collect::<Result<Vec<_>>>()?;
            self.touched.extend(idx.iter().filter_map(|&i| data.items[i].sample));
            let out = self.train_step(&images, &labels, &perms, lr).map_err(|e| match e {
                CsawError::NonFinite(m) => CsawError::NonFinite(format!("{m} in epoch {epoch}")),
                other => other,
            })?;
            let r = out.report;
            sum.ce += r.ce;
            sum.ssl += r.ssl;
            sum.recon += r.recon;
            sum.dm += r.dm;
            sum.total += r.total;
            correct += out.correct;
            seen += out.batch;
            if let Some(log) = log.as_deref_mut() {
                log.write(&json!({
                    "kind": "step", "epoch": epoch, "step": self.steps_done, "lr": lr,
                    "alpha": self.weights.alpha, "ce": r.ce, "ssl": r.ssl, "recon": r.recon,
                    "dm": r.dm, "total": r.total,
                }))?;
            }
        }
        let n = batches.len() as f64;
        let summary = EpochSummary {
            epoch,
            lr,
            alpha: self.weights.alpha,
            loss: LossReport {
                ce: sum.ce / n,
                ssl: sum.ssl / n,
                recon: sum.recon / n,
                dm: sum.dm / n,
                total: sum.total / n,
            },
            train_top1: correct as f64 / seen as f64,
            steps: batches.len(),
        };
        self.epochs_done = epoch;
        if let Some(log) = log {
            let mut rec = serde_json::to_value(&summary)?;
            rec["kind"] = json!("epoch");
            log.write(&rec)?;
        }
        log::info!(
            "epoch {epoch}: total {:.4} (ce {:.4} ssl {:.4} recon {:.4} dm {:.4}) train top-1 {:.3}",
            summary.loss.total,
            summary.loss.ce,
            summary.loss.ssl,
            summary.loss.recon,
            summary.loss.dm,
            summary.train_top1
        );
        Ok(summary)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Stop after this many completed epochs (used to interrupt runs).
    pub stop_after: Option<usize>,
}

/// Trains until `config.epochs` epochs are complete, checkpointing after
/// every epoch.
pub fn fit(trainer: &mut Trainer, data: &LabeledSet, options: &FitOptions) -> Result<Vec<EpochSummary>> {
    if data.class_names != trainer.bank.class_names {
        return Err(CsawError::ClassMismatch(format!(
            "training data classes {:?} differ from the prompt classes {:?}",
            data.class_names, trainer.bank.class_names
        )));
    }
    let mut log = match &options.log {
        Some(p) => Some(JsonlLog::open(p, trainer.epochs_done > 0)?),
        None => None,
    };
    let last = options
        .stop_after
        .map_or(trainer.config.epochs, |s| s.min(trainer.config.epochs));
    let mut history = Vec::new();
    while trainer.epochs_done < last {
        history.push(trainer.run_epoch(data, log.as_mut())?);
        if let Some(p) = &options.checkpoint {
            trainer.checkpoint().save(p)?;
        }
    }
    Ok(history)
}
