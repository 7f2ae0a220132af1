//! Base-to-new, cross-dataset and single-source multi-target protocols:
//! task construction, evaluation, reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datahub::{make_b2n_split, make_full_split, sample_shots, DatasetManifest, LabeledSet, SplitFile};
use crate::error::{CsawError, Result};
use crate::imageops::{derive_seed, sample_permutation};
use crate::model::{argmax_rows, CsawModel, PromptBank, TrainableParams};

/// Source domain for cross-dataset runs when none is configured.
pub const DEFAULT_CD_SOURCE: &str = "PatternNet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    B2n,
    Cd,
    Ssmt,
}

impl FromStr for TaskKind {
    type Err = CsawError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b2n" => Ok(TaskKind::B2n),
            "cd" => Ok(TaskKind::Cd),
            "ssmt" => Ok(TaskKind::Ssmt),
            other => Err(CsawError::Config(format!("unknown task '{other}' (expected b2n, cd or ssmt)"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::B2n => "b2n",
            TaskKind::Cd => "cd",
            TaskKind::Ssmt => "ssmt",
        })
    }
}

/// `2ab / (a + b)` for strictly positive accuracies.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0 && new > 0.0) || !base.is_finite() || !new.is_finite() {
        return Err(CsawError::InvalidArgument(format!(
            "harmonic mean needs positive accuracies, got {base} and {new}"
        )));
    }
    Ok(2.0 * base * new / (base + new))
}

/// Harmonic mean that reports 0 when either side is 0.
fn hm_or_zero(base: f64, new: f64) -> f64 {
    harmonic_mean(base, new).unwrap_or(0.0)
}

#[derive(Debug, Clone, Default)]
pub struct TaskOptions {
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub source: Option<String>,
    pub targets: Vec<String>,
    pub shared_classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub source: String,
    pub targets: Vec<String>,
    pub shots: usize,
    pub seeds: Vec<u64>,
    /// One split per seed, over the (possibly restricted) source manifest.
    pub splits: BTreeMap<u64, SplitFile>,
    pub shared_classes: Option<Vec<String>>,
}

/// A task together with the manifests it refers to, restricted where the
/// protocol requires it.
#[derive(Debug, Clone)]
pub struct ResolvedTask {
    pub spec: TaskSpec,
    pub manifests: BTreeMap<String, DatasetManifest>,
    pub warnings: Vec<String>,
}

impl ResolvedTask {
    pub fn source(&self) -> &DatasetManifest {
        &self.manifests[&self.spec.source]
    }

    pub fn split(&self, seed: u64) -> Result<&SplitFile> {
        self.spec
            .splits
            .get(&seed)
            .ok_or_else(|| CsawError::InvalidArgument(format!("seed {seed} is not part of this task")))
    }

    /// Few-shot training data for one seed (base classes only under B2N).
    pub fn training_set(&self, seed: u64) -> Result<LabeledSet> {
        let split = self.split(seed)?;
        LabeledSet::from_manifest(self.source(), &split.base_classes, &split.training_indices())
    }
}

fn find<'a>(manifests: &'a BTreeMap<String, DatasetManifest>, name: &str) -> Result<&'a DatasetManifest> {
    manifests
        .get(name)
        .or_else(|| manifests.values().find(|m| m.name.eq_ignore_ascii_case(name)))
        .ok_or_else(|| CsawError::MissingDataset(name.to_string()))
}

pub fn build_task(
    kind: TaskKind,
    options: &TaskOptions,
    manifests: &BTreeMap<String, DatasetManifest>,
) -> Result<ResolvedTask> {
    if options.seeds.is_empty() {
        return Err(CsawError::Config("at least one seed is required".into()));
    }
    if options.shots == 0 {
        return Err(CsawError::Config("shots must be at least 1".into()));
    }
    let source_name = match (&options.source, kind) {
        (Some(s), _) => s.clone(),
        (None, TaskKind::Cd) => DEFAULT_CD_SOURCE.to_string(),
        (None, _) if manifests.len() == 1 => manifests.keys().next().expect("one").clone(),
        (None, _) => {
            return Err(CsawError::Config(format!(
                "{kind} needs a source dataset when {} manifests are supplied",
                manifests.len()
            )))
        }
    };
    let source = find(manifests, &source_name)?.clone();
    let targets: Vec<String> = match kind {
        TaskKind::B2n => Vec::new(),
        _ if !options.targets.is_empty() => options.targets.clone(),
        _ => manifests
            .values()
            .map(|m| m.name.clone())
            .filter(|n| *n != source.name)
            .collect(),
    };
    if kind != TaskKind::B2n && targets.is_empty() {
        return Err(CsawError::Config(format!("{kind} needs at least one target dataset")));
    }
    let mut resolved = BTreeMap::new();
    resolved.insert(source.name.clone(), source.clone());
    for t in &targets {
        let m = find(manifests, t)?;
        resolved.insert(m.name.clone(), m.clone());
    }

    if kind == TaskKind::Ssmt {
        let shared = options.shared_classes.as_ref().ok_or_else(|| {
            CsawError::Config("ssmt needs the shared class list (ssmt.shared_classes)".into())
        })?;
        if shared.is_empty() {
            return Err(CsawError::Config("ssmt shared class list is empty".into()));
        }
        let unique: BTreeSet<&String> = shared.iter().collect();
        if unique.len() != shared.len() {
            return Err(CsawError::Config("ssmt shared class list has duplicates".into()));
        }
        let mut problems = Vec::new();
        for m in resolved.values() {
            let missing: Vec<&String> = shared.iter().filter(|c| m.class_index(c).is_none()).collect();
            if !missing.is_empty() {
                problems.push(format!("`{}` lacks {missing:?}", m.name));
            }
        }
        if !problems.is_empty() {
            return Err(CsawError::ClassMismatch(problems.join("; ")));
        }
        for m in resolved.values_mut() {
            *m = m.restrict(shared)?;
        }
    }

    let source = resolved[&source.name].clone();
    let mut splits = BTreeMap::new();
    let mut warnings = Vec::new();
    for &seed in &options.seeds {
        let mut split = match kind {
            TaskKind::B2n => make_b2n_split(&source, seed)?,
            _ => make_full_split(&source, seed),
        };
        let shots = sample_shots(&source, &split.base_classes, options.shots, seed)?;
        warnings.extend(shots.warnings.iter().map(|w| format!("seed {seed}: {w}")));
        split.shots = shots.shots;
        splits.insert(seed, split);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ResolvedTask {
        spec: TaskSpec {
            kind,
            source: source.name.clone(),
            targets,
            shots: options.shots,
            seeds: options.seeds.clone(),
            splits,
            shared_classes: options.shared_classes.clone(),
        },
        manifests: resolved,
        warnings,
    })
}

/// Fails if any sample presented during training belongs to a class
/// outside the split's base classes.
pub fn audit_b2n(split: &SplitFile, manifest: &DatasetManifest, touched: &BTreeSet<usize>) -> Result<()> {
    let base: BTreeSet<usize> = split.base_classes.iter().copied().collect();
    let leaked: Vec<usize> = touched
        .iter()
        .copied()
        .filter(|&s| s >= manifest.samples.len() || !base.contains(&manifest.label(s)))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(CsawError::InvalidArgument(format!(
            "label audit failed: {} training samples outside the base classes (first: {})",
            leaked.len(),
            leaked[0]
        )))
    }
}

/// One evaluation domain: a labeled set and a name.
#[derive(Debug, Clone)]
pub struct EvalDomain {
    pub split: String,
    pub data: LabeledSet,
}

/// Held-out domains for one seed. B2N yields `base` and `new`; CD and SSMT
/// yield the source (minus training shots) followed by each target.
pub fn eval_domains(task: &ResolvedTask, seed: u64, max_per_class: Option<usize>) -> Result<Vec<EvalDomain>> {
    let split = task.split(seed)?;
    let source = task.source();
    let train: BTreeSet<usize> = split.training_indices().into_iter().collect();
    let cap = |m: &DatasetManifest, classes: &[usize], exclude: &BTreeSet<usize>| -> Vec<usize> {
        let mut out = Vec::new();
        for &c in classes {
            let idx = m.indices_of_class(c).into_iter().filter(|s| !exclude.contains(s));
            match max_per_class {
                Some(n) => out.extend(idx.take(n)),
                None => out.extend(idx),
            }
        }
        out
    };
    let none = BTreeSet::new();
    let mut out = Vec::new();
    match task.spec.kind {
        TaskKind::B2n => {
            out.push(EvalDomain {
                split: "base".into(),
                data: LabeledSet::from_manifest(source, &split.base_classes, &cap(source, &split.base_classes, &train))?,
            });
            out.push(EvalDomain {
                split: "new".into(),
                data: LabeledSet::from_manifest(source, &split.new_classes, &cap(source, &split.new_classes, &none))?,
            });
        }
        TaskKind::Cd | TaskKind::Ssmt => {
            let all: Vec<usize> = (0..source.num_classes()).collect();
            out.push(EvalDomain {
                split: source.name.clone(),
                data: LabeledSet::from_manifest(source, &all, &cap(source, &all, &train))?,
            });
            for t in &task.spec.targets {
                let m = find(&task.manifests, t)?;
                let all: Vec<usize> = (0..m.num_classes()).collect();
                out.push(EvalDomain {
                    split: m.name.clone(),
                    data: LabeledSet::from_manifest(m, &all, &cap(m, &all, &none))?,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JumbleEval {
    pub grid: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    /// Predicted label per item, in item order.
    pub predictions: Vec<usize>,
}

impl Accuracy {
    pub fn top1(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Top-1 accuracy of the model on `data`, with prompts built from the
/// set's own class names.
///
/// Style statistics are batch-level, so batches are drawn in a seeded
/// shuffled order rather than class by class.
pub fn evaluate_set(
    model: &CsawModel,
    params: &TrainableParams,
    data: &LabeledSet,
    batch_size: usize,
    order_seed: u64,
    jumble: Option<JumbleEval>,
) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(CsawError::InvalidArgument("evaluation set is empty".into()));
    }
    let bank = PromptBank::new(model.backbone.as_ref(), &data.class_names, model.spec.context_length)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(&[order_seed, 0xE7A1]));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut predictions = vec![0; data.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let images = data.load(chunk)?;
        let perms = match jumble {
            Some(j) => Some(
                chunk
                    .iter()
                    .map(|&i| sample_permutation(j.grid, derive_seed(&[j.seed, 0x7E57, i as u64])))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let probs = model.predict(params, &images, &bank, perms.as_deref())?;
        for (&i, p) in chunk.iter().zip(argmax_rows(probs.view())) {
            predictions[i] = p;
        }
    }
    let correct = predictions
        .iter()
        .zip(&data.items)
        .filter(|(p, it)| **p == it.label)
        .count();
    Ok(Accuracy {
        correct,
        total: data.len(),
        predictions,
    })
}

/// One line of the JSON report. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskKind,
    /// A seed, or `"mean"`.
    pub seed: String,
    pub split: String,
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hm: Option<f64>,
}

/// Per-seed accuracies for every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    /// seed → split → accuracy.
    pub per_seed: BTreeMap<u64, BTreeMap<String, CellCount>>,
    pub split_order: Vec<String>,
    pub alpha: Option<f64>,
    pub jumble_eval: bool,
}

/// Counts for one (seed, split) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub correct: usize,
    pub total: usize,
}

impl CellCount {
    pub fn top1(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalResult {
    pub fn new(task: TaskKind, alpha: Option<f64>, jumble_eval: bool) -> Self {
        EvalResult {
            task,
            per_seed: BTreeMap::new(),
            split_order: Vec::new(),
            alpha,
            jumble_eval,
        }
    }

    pub fn record(&mut self, seed: u64, split: &str, acc: &Accuracy) {
        if !self.split_order.iter().any(|s| s == split) {
            self.split_order.push(split.to_string());
        }
        self.per_seed.entry(seed).or_default().insert(
            split.to_string(),
            CellCount {
                correct: acc.correct,
                total: acc.total,
            },
        );
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.per_seed.keys().copied().collect()
    }

    fn top1(&self, seed: u64, split: &str) -> f64 {
        self.per_seed[&seed].get(split).map_or(0.0, CellCount::top1)
    }

    /// Mean over seeds of one split's accuracy.
    pub fn mean_top1(&self, split: &str) -> f64 {
        mean(&self.seeds().iter().map(|&s| self.top1(s, split)).collect::<Vec<_>>())
    }

    /// Per-seed top-1 of the headline metric: pooled base+new accuracy
    /// under B2N, the mean over targets otherwise.
    pub fn per_seed_top1(&self) -> BTreeMap<u64, f64> {
        self.seeds().into_iter().map(|s| (s, self.seed_top1(s))).collect()
    }

    fn seed_top1(&self, seed: u64) -> f64 {
        let cells = &self.per_seed[&seed];
        match self.task {
            TaskKind::B2n => {
                let (c, t) = cells.values().fold((0, 0), |(c, t), a| (c + a.correct, t + a.total));
                if t == 0 {
                    0.0
                } else {
                    c as f64 / t as f64
                }
            }
            _ => mean(&self.target_splits().iter().map(|s| self.top1(seed, s)).collect::<Vec<_>>()),
        }
    }

    fn target_splits(&self) -> Vec<String> {
        self.split_order.iter().skip(1).cloned().collect()
    }

    pub fn mean_of_seeds(&self) -> f64 {
        mean(&self.per_seed_top1().values().copied().collect::<Vec<_>>())
    }

    /// Mean base accuracy, mean new accuracy, and their harmonic mean.
    pub fn b2n_summary(&self) -> Option<(f64, f64, f64)> {
        if self.task != TaskKind::B2n {
            return None;
        }
        let b = self.mean_top1("base");
        let n = self.mean_top1("new");
        Some((b, n, hm_or_zero(b, n)))
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let task = self.task;
        let mut push_seed = |seed: String, cells: Vec<(String, f64)>, top1: f64| {
            match task {
                TaskKind::B2n => {
                    let get = |k: &str| cells.iter().find(|(s, _)| s == k).map_or(0.0, |c| c.1);
                    let (b, n) = (get("base"), get("new"));
                    rows.push(ReportRow {
                        task,
                        seed,
                        split: "base-to-new".into(),
                        top1,
                        base: Some(b),
                        new: Some(n),
                        hm: Some(hm_or_zero(b, n)),
                    });
                }
                _ => {
                    for (split, acc) in cells {
                        rows.push(ReportRow { task, seed: seed.clone(), split, top1: acc, base: None, new: None, hm: None });
                    }
                    rows.push(ReportRow { task, seed, split: "average".into(), top1, base: None, new: None, hm: None });
                }
            }
        };
        for s in self.seeds() {
            let cells = self.split_order.iter().map(|sp| (sp.clone(), self.top1(s, sp))).collect();
            push_seed(s.to_string(), cells, self.seed_top1(s));
        }
        let cells = self.split_order.iter().map(|sp| (sp.clone(), self.mean_top1(sp))).collect();
        push_seed("mean".into(), cells, self.mean_of_seeds());
        rows
    }

    pub fn to_json(&self) -> Result<String> {
        let mut doc = serde_json::json!({
            "task": self.task,
            "jumble_eval": self.jumble_eval,
            "rows": self.rows(),
        });
        if let Some(a) = self.alpha {
            doc["alpha"] = serde_json::json!(a);
        }
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Percentages with two decimals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        match self.task {
            TaskKind::B2n => {
                let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>8}", "seed", "base", "new", "HM");
                for r in self.rows() {
                    let _ = writeln!(
                        out,
                        "{:<8} {:>8} {:>8} {:>8}",
                        r.seed,
                        pct(r.base.unwrap_or(0.0)),
                        pct(r.new.unwrap_or(0.0)),
                        pct(r.hm.unwrap_or(0.0))
                    );
                }
            }
            _ => {
                let mut header = format!("{:<8}", "seed");
                for (i, s) in self.split_order.iter().enumerate() {
                    let label = if i == 0 { format!("{s} (src)") } else { s.clone() };
                    let _ = write!(header, " {label:>14}");
                }
                let _ = writeln!(out, "{header} {:>14}", "average");
                let rows = self.rows();
                for chunk in rows.chunks(self.split_order.len() + 1) {
                    let mut line = format!("{:<8}", chunk[0].seed);
                    for r in chunk {
                        let _ = write!(line, " {:>14}", pct(r.top1));
                    }
                    let _ = writeln!(out, "{line}");
                }
            }
        }
        out
    }
}

/// Writes an α-sweep as CSV and a minimal SVG line chart.
pub fn write_alpha_sweep(points: &[(f64, f64)], csv_path: &Path, svg_path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(CsawError::InvalidArgument("no sweep points".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut csv = String::from("alpha,top1\n");
    for (a, t) in &pts {
        let _ = writeln!(csv, "{a},{t}");
    }
    std::fs::write(csv_path, csv).map_err(|e| CsawError::io(csv_path, e))?;

    let (w, h, m) = (480.0, 320.0, 40.0);
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |a: f64| m + a * (w - 2.0 * m);
    let y = |t: f64| h - m - (t - lo) / span * (h - 2.0 * m);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">alpha</text>\n\
         <text x=\"4\" y=\"{m}\" font-size=\"12\">{top:.2}%</text>\n\
         <text x=\"4\" y=\"{b}\" font-size=\"12\">{bot:.2}%</text>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        ty = h - 8.0,
        top = 100.0 * hi,
        bot = 100.0 * lo,
    );
    let path: Vec<String> = pts.iter().map(|(a, t)| format!("{:.1},{:.1}", x(*a), y(*t))).collect();
    let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    for (a, t) in &pts {
        let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>", x(*a), y(*t));
    }
    svg.push_str("</svg>\n");
    std::fs::write(svg_path, svg).map_err(|e| CsawError::io(svg_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(name: &str, classes: &[&str], per_class: usize) -> DatasetManifest {
        DatasetManifest {
            name: name.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            samples: (0..classes.len() * per_class)
                .map(|i| (format!("{}/{i}.png", classes[i / per_class]), i / per_class))
                .collect(),
            image_size: (64, 64),
            root: Default::default(),
        }
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i:02}")).collect()
    }

    fn opts() -> TaskOptions {
        TaskOptions { shots: 2, seeds: vec![1, 2, 3], ..Default::default() }
    }

    #[test]
    fn hm_examples() {
        assert!((harmonic_mean(92.90, 66.03).unwrap() - 77.20).abs() <= 0.05);
        assert!((harmonic_mean(96.03, 70.18).unwrap() - 81.09).abs() <= 0.05);
        assert!((harmonic_mean(42.0, 42.0).unwrap() - 42.0).abs() < 1e-12);
        assert!(harmonic_mean(0.0, 1.0).is_err());
        assert!(harmonic_mean(1.0, -1.0).is_err());
    }

    #[test]
    fn b2n_task_sizes() {
        let n = names(38);
        let refs: Vec<&str> = n.iter().map(String::as_str).collect();
        let ms = BTreeMap::from([("pn".to_string(), manifest("pn", &refs, 3))]);
        let t = build_task(TaskKind::B2n, &opts(), &ms).unwrap();
        for s in &t.spec.splits.values().collect::<Vec<_>>() {
            assert_eq!((s.base_classes.len(), s.new_classes.len()), (19, 19));
            assert_eq!(s.shots.len(), 19);
        }
    }

    #[test]
    fn cd_requires_source_and_targets() {
        let ms = BTreeMap::from([
            ("PatternNet".to_string(), manifest("PatternNet", &["a", "b"], 3)),
            ("RSICD".to_string(), manifest("RSICD", &["a", "c"], 3)),
        ]);
        let t = build_task(TaskKind::Cd, &opts(), &ms).unwrap();
        assert_eq!(t.spec.source, "PatternNet");
        assert_eq!(t.spec.targets, vec!["RSICD".to_string()]);
        let missing = TaskOptions { targets: vec!["EuroSAT".into()], ..opts() };
        match build_task(TaskKind::Cd, &missing, &ms) {
            Err(CsawError::MissingDataset(n)) => assert_eq!(n, "EuroSAT"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ssmt_restricts_and_rejects() {
        let shared = names(16);
        let mut extra = names(20);
        extra.reverse();
        let full: Vec<&str> = extra.iter().map(String::as_str).collect();
        let mut short_list = names(16);
        short_list.pop();
        let short: Vec<&str> = short_list.iter().map(String::as_str).collect();
        let ms = BTreeMap::from([
            ("src".to_string(), manifest("src", &full, 2)),
            ("t1".to_string(), manifest("t1", &full, 2)),
        ]);
        let o = TaskOptions { source: Some("src".into()), shared_classes: Some(shared.clone()), ..opts() };
        let t = build_task(TaskKind::Ssmt, &o, &ms).unwrap();
        for m in t.manifests.values() {
            assert_eq!(m.classes, shared);
        }
        let mut bad = ms.clone();
        bad.insert("t2".into(), manifest("t2", &short, 2));
        assert!(matches!(build_task(TaskKind::Ssmt, &o, &bad), Err(CsawError::ClassMismatch(_))));
        let no_list = TaskOptions { source: Some("src".into()), ..opts() };
        assert!(build_task(TaskKind::Ssmt, &no_list, &ms).unwrap_err().is_validation());
    }

    #[test]
    fn audit_flags_new_class_samples() {
        let m = manifest("d", &["a", "b", "c", "e"], 4);
        let split = make_b2n_split(&m, 1).unwrap();
        let base_sample = m.indices_of_class(split.base_classes[0])[0];
        let new_sample = m.indices_of_class(split.new_classes[0])[0];
        assert!(audit_b2n(&split, &m, &BTreeSet::from([base_sample])).is_ok());
        assert!(audit_b2n(&split, &m, &BTreeSet::from([base_sample, new_sample])).is_err());
    }

    fn acc(correct: usize, total: usize) -> Accuracy {
        Accuracy { correct, total, predictions: Vec::new() }
    }

    #[test]
    fn b2n_result_aggregation() {
        let mut r = EvalResult::new(TaskKind::B2n, Some(0.5), false);
        for (s, b, n) in [(1, 9, 6), (2, 8, 7), (3, 10, 5)] {
            r.record(s, "base", &acc(b, 10));
            r.record(s, "new", &acc(n, 10));
        }
        let (b, n, hm) = r.b2n_summary().unwrap();
        assert!((b - 0.9).abs() < 1e-12 && (n - 0.6).abs() < 1e-12);
        assert!((hm - 0.72).abs() < 1e-12);
        let per = r.per_seed_top1();
        assert!((r.mean_of_seeds() - (per[&1] + per[&2] + per[&3]) / 3.0).abs() < 1e-15);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let row = &json["rows"][0];
        for k in ["task", "seed", "split", "top1", "base", "new", "hm"] {
            assert!(row.get(k).is_some(), "missing {k}");
        }
        assert!(r.table().contains("72.00"));
    }

    #[test]
    fn cd_rows_include_average() {
        let mut r = EvalResult::new(TaskKind::Cd, None, false);
        r.record(1, "PatternNet", &acc(9, 10));
        r.record(1, "RSICD", &acc(5, 10));
        r.record(1, "EuroSAT", &acc(3, 10));
        let rows = r.rows();
        let avg = rows.iter().find(|x| x.split == "average" && x.seed == "1").unwrap();
        assert!((avg.top1 - 0.4).abs() < 1e-12);
        assert!(r.table().lines().count() >= 3);
    }

    #[test]
    fn alpha_sweep_files() {
        let dir = tempfile::tempdir().unwrap();
        let (c, s) = (dir.path().join("a.csv"), dir.path().join("a.svg"));
        write_alpha_sweep(&[(0.7, 0.6), (0.5, 0.7), (0.0, 0.5)], &c, &s).unwrap();
        let csv = std::fs::read_to_string(&c).unwrap();
        assert!(csv.starts_with("alpha,top1\n0,0.5\n0.5,0.7"));
        assert!(std::fs::read_to_string(&s).unwrap().contains("<polyline"));
    }
}
