//! `csaw`: splits, training, evaluation and reconstruction demos.
//!
//! Exit status is 0 on success, 2 for configuration or validation problems
//! and 1 for any other failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csaw::backbone::Backbone;
use csaw::checkpoint::Checkpoint;
use csaw::config::{keys_help, RunConfig};
use csaw::datahub::{generate_synthetic_dataset, load_manifest, DatasetManifest};
use csaw::imageops::{apply_jigsaw, load_image, sample_permutation, to_rgb8, IMAGE_SIDE};
use csaw::model::{CsawModel, ReconTarget};
use csaw::protocols::{self, build_task, EvalResult, JumbleEval, ResolvedTask, TaskKind, TaskOptions};
use csaw::trainer::{fit, FitOptions, Trainer};
use csaw::CsawError;

const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
const LOG_FILE: &str = "train.jsonl";

#[derive(Parser)]
#[command(
    name = "csaw",
    version,
    about = "Jigsaw-guided visual-attentive prompt learning on a frozen vision-language backbone",
    after_help = keys_help()
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one split file per seed for a protocol.
    #[command(after_help = keys_help())]
    MakeSplits {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Directory for the split files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and checkpoint after every epoch.
    #[command(after_help = keys_help())]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Shorthand for --set loss.alpha=...
        #[arg(long)]
        alpha: Option<f64>,
        /// Shorthand for --set train.epochs=...
        #[arg(long)]
        epochs: Option<usize>,
        /// Shorthand for --set backbone.name=...
        #[arg(long)]
        backbone: Option<String>,
        /// Continue from existing checkpoints instead of starting over.
        #[arg(long)]
        resume: bool,
        /// Run directory (one seed_<s>/ subdirectory per seed).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained runs and write a JSON report.
    #[command(after_help = keys_help())]
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory written by `train`; repeat to produce an alpha sweep.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Dataset roots (defaults to those recorded at training time).
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        /// Jigsaw test images before encoding them.
        #[arg(long)]
        jumble_eval: bool,
        /// Seed of the test-time permutations.
        #[arg(long, default_value_t = 0)]
        jumble_seed: u64,
        /// Report path (single run only; default <run>/report.json).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Where to write alpha_sweep.csv/.svg when several runs are given.
        #[arg(long)]
        sweep_out: Option<PathBuf>,
    },
    /// Save x, the jumbled x' and the reconstruction side by side.
    DemoReconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint written by `train` (seed_<s>/checkpoint.safetensors)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image; resized to 224x224 and normalized like training data
        #[arg(long)]
        image: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Patches per side (default: the training grid).
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value_t = 0)]
        perm_seed: u64,
    },
    /// Generate a small synthetic dataset of striped color classes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with dotted config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set loss.alpha=0.7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            cfg.merge_toml_str(&text)?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root laid out as <root>/<class>/<images> (repeatable).
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    /// Protocol: b2n, cd or ssmt.
    #[arg(long, default_value = "b2n")]
    task: TaskKind,
    /// Comma-separated seeds (shorthand for --set seeds=[...]).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Shots per class (shorthand for --set train.shots=...).
    #[arg(long)]
    shots: Option<usize>,
    /// Source dataset name.
    #[arg(long)]
    source: Option<String>,
    /// Comma-separated target dataset names.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Comma-separated class names shared by every ssmt domain.
    #[arg(long, value_delimiter = ',')]
    shared_classes: Option<Vec<String>>,
    /// File with one shared class name per line.
    #[arg(long)]
    shared_classes_file: Option<PathBuf>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = &self.seeds {
            set(cfg, "seeds", serde_json::to_string(s)?)?;
        }
        if let Some(n) = self.shots {
            set(cfg, "train.shots", n)?;
        }
        if let Some(s) = &self.source {
            set(cfg, "task.source", serde_json::to_string(s)?)?;
        }
        if let Some(t) = &self.targets {
            set(cfg, "task.targets", serde_json::to_string(t)?)?;
        }
        if let Some(c) = &self.shared_classes {
            set(cfg, "ssmt.shared_classes", serde_json::to_string(c)?)?;
        }
        if let Some(p) = &self.shared_classes_file {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            set(cfg, "ssmt.shared_classes", serde_json::to_string(&names)?)?;
        }
        Ok(())
    }
}

/// Applies a flag as a config override; JSON scalars and string lists are
/// valid TOML values.
fn set(cfg: &mut RunConfig, key: &str, value: impl std::fmt::Display) -> Result<()> {
    Ok(cfg.apply_override(&format!("{key}={value}"))?)
}

fn task_options(cfg: &RunConfig) -> TaskOptions {
    TaskOptions {
        shots: cfg.train.shots,
        seeds: cfg.seeds.clone(),
        source: cfg.source.clone(),
        targets: cfg.targets.clone(),
        shared_classes: cfg.shared_classes.clone(),
    }
}

fn load_manifests(roots: &[PathBuf]) -> Result<BTreeMap<String, DatasetManifest>> {
    let mut out = BTreeMap::new();
    for root in roots {
        let m = load_manifest(root)?;
        if out.contains_key(&m.name) {
            return Err(CsawError::Config(format!("two datasets are named `{}`", m.name)).into());
        }
        out.insert(m.name.clone(), m);
    }
    Ok(out)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn make_splits(config: &ConfigArgs, data: &DataArgs, out: &Path) -> Result<()> {
    let mut cfg = config.resolve(RunConfig::default())?;
    data.apply(&mut cfg)?;
    cfg.validate()?;
    let task = build_task(data.task, &task_options(&cfg), &load_manifests(&data.datasets)?)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (seed, split) in &task.spec.splits {
        let path = out.join(format!("{}_{}_seed{seed}.json", task.spec.source, task.spec.kind));
        split.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Resuming may extend a run, so the epoch count is allowed to differ.
fn same_except_epochs(a: &serde_json::Value, b: &serde_json::Value) -> bool {
    let strip = |v: &serde_json::Value| {
        let mut v = v.clone();
        if let Some(m) = v.as_object_mut() {
            m.remove("train.epochs");
        }
        v
    };
    strip(a) == strip(b)
}

struct TrainFlags<'a> {
    alpha: Option<f64>,
    epochs: Option<usize>,
    backbone: Option<&'a str>,
    resume: bool,
}

fn train(config: &ConfigArgs, data: &DataArgs, flags: TrainFlags<'_>, out: &Path) -> Result<()> {
    let mut cfg = config.resolve(RunConfig::default())?;
    data.apply(&mut cfg)?;
    if let Some(a) = flags.alpha {
        set(&mut cfg, "loss.alpha", a)?;
    }
    if let Some(e) = flags.epochs {
        set(&mut cfg, "train.epochs", e)?;
    }
    if let Some(b) = flags.backbone {
        set(&mut cfg, "backbone.name", serde_json::to_string(b)?)?;
    }
    cfg.validate()?;
    let task = build_task(data.task, &task_options(&cfg), &load_manifests(&data.datasets)?)?;
    let backbone = cfg.load_backbone()?;
    let spec = cfg.model_spec(backbone.as_ref())?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.toml"), &cfg.to_toml_string()?)?;
    write(&out.join("task.json"), &serde_json::to_string_pretty(&task.spec)?)?;
    let roots: Vec<PathBuf> = data.datasets.iter().map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone())).collect();
    write(&out.join("datasets.json"), &serde_json::to_string_pretty(&roots)?)?;
    let flat = serde_json::to_value(cfg.to_flat())?;

    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let train_set = task.training_set(seed)?;
        let mut trainer = if flags.resume && ckpt_path.exists() {
            let ckpt = Checkpoint::load(&ckpt_path, backbone.as_ref())?;
            if !same_except_epochs(&ckpt.header.run_config, &flat) {
                return Err(CsawError::Config(format!(
                    "{} was trained with a different configuration; drop --resume or match it",
                    ckpt_path.display()
                ))
                .into());
            }
            log::info!("seed {seed}: resuming after epoch {}", ckpt.header.epoch);
            let mut t = Trainer::from_checkpoint(ckpt, backbone.clone())?;
            t.config.epochs = cfg.train.epochs;
            t
        } else {
            let model = CsawModel::new(backbone.clone(), spec.clone(), seed)?;
            let bank = model.prompt_bank(&train_set.class_names)?;
            Trainer::new(model, bank, cfg.loss, cfg.train_for_seed(seed))?
        };
        trainer.run_config = flat.clone();
        let options = FitOptions {
            checkpoint: Some(ckpt_path.clone()),
            log: Some(dir.join(LOG_FILE)),
            stop_after: None,
        };
        let history = fit(&mut trainer, &train_set, &options)?;
        if task.spec.kind == TaskKind::B2n {
            protocols::audit_b2n(task.split(seed)?, task.source(), &trainer.touched)?;
        }
        match history.last() {
            Some(s) => println!(
                "seed {seed}: epoch {} total {:.4} (ce {:.4} recon {:.4} dm {:.4}) train top-1 {:.3} -> {}",
                s.epoch,
                s.loss.total,
                s.loss.ce,
                s.loss.recon,
                s.loss.dm,
                s.train_top1,
                ckpt_path.display()
            ),
            None => println!("seed {seed}: already complete -> {}", ckpt_path.display()),
        }
    }
    Ok(())
}

/// Rebuilds the task of a run directory and checks it matches what was
/// trained.
fn load_run(run: &Path, config: &ConfigArgs, datasets: &[PathBuf]) -> Result<(RunConfig, ResolvedTask)> {
    let cfg_path = run.join("config.toml");
    let text = fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = config.resolve(RunConfig::from_toml_str(&text)?)?;
    cfg.validate()?;
    let spec_path = run.join("task.json");
    let saved: protocols::TaskSpec = serde_json::from_str(
        &fs::read_to_string(&spec_path).with_context(|| format!("reading {}", spec_path.display()))?,
    )?;
    let roots: Vec<PathBuf> = if datasets.is_empty() {
        let p = run.join("datasets.json");
        serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?
    } else {
        datasets.to_vec()
    };
    let task = build_task(saved.kind, &task_options(&cfg), &load_manifests(&roots)?)?;
    if task.spec != saved {
        return Err(CsawError::Config(format!(
            "datasets or settings no longer reproduce the task in {}",
            spec_path.display()
        ))
        .into());
    }
    Ok((cfg, task))
}

fn evaluate_run(run: &Path, cfg: &RunConfig, task: &ResolvedTask, jumble: Option<JumbleEval>) -> Result<EvalResult> {
    let backbone = cfg.load_backbone()?;
    let mut result = EvalResult::new(task.spec.kind, Some(cfg.loss.alpha), jumble.is_some());
    for &seed in &task.spec.seeds {
        let path = run.join(format!("seed_{seed}")).join(CHECKPOINT_FILE);
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let ckpt = Checkpoint::load(&path, backbone.as_ref())?;
        if ckpt.header.epoch < ckpt.header.train.epochs {
            log::warn!(
                "{} holds epoch {} of {}; evaluating it anyway",
                path.display(),
                ckpt.header.epoch,
                ckpt.header.train.epochs
            );
        }
        let model = CsawModel { backbone: backbone.clone(), spec: ckpt.header.spec, params: ckpt.params };
        for domain in protocols::eval_domains(task, seed, cfg.max_per_class)? {
            let acc = protocols::evaluate_set(&model, &model.params, &domain.data, cfg.train.batch_size, seed, jumble)?;
            log::info!("seed {seed} {}: {}/{}", domain.split, acc.correct, acc.total);
            result.record(seed, &domain.split, &acc);
        }
    }
    Ok(result)
}

struct EvalFlags<'a> {
    datasets: &'a [PathBuf],
    jumble_eval: bool,
    jumble_seed: u64,
    report: Option<&'a Path>,
    sweep_out: Option<&'a Path>,
}

fn eval(config: &ConfigArgs, runs: &[PathBuf], flags: EvalFlags<'_>) -> Result<()> {
    if flags.report.is_some() && runs.len() > 1 {
        return Err(CsawError::Config("--report needs a single --run".into()).into());
    }
    let mut sweep = Vec::new();
    for run in runs {
        let (cfg, task) = load_run(run, config, flags.datasets)?;
        let jumble = flags.jumble_eval.then_some(JumbleEval { grid: cfg.train.jigsaw_grid, seed: flags.jumble_seed });
        let result = evaluate_run(run, &cfg, &task, jumble)?;
        let default_name = if flags.jumble_eval { "report_jumbled.json" } else { "report.json" };
        let report = flags.report.map_or_else(|| run.join(default_name), Path::to_path_buf);
        write(&report, &result.to_json()?)?;
        println!("{} ({}, alpha {}):", run.display(), task.spec.kind, cfg.loss.alpha);
        print!("{}", result.table());
        println!("report: {}", report.display());
        sweep.push((cfg.loss.alpha, result.mean_of_seeds()));
    }
    if runs.len() > 1 {
        let dir = flags.sweep_out.map_or_else(|| runs[0].clone(), Path::to_path_buf);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let (csv, svg) = (dir.join("alpha_sweep.csv"), dir.join("alpha_sweep.svg"));
        protocols::write_alpha_sweep(&sweep, &csv, &svg)?;
        println!("alpha sweep: {} {}", csv.display(), svg.display());
    }
    Ok(())
}

fn demo_reconstruct(
    config: &ConfigArgs,
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    grid: Option<usize>,
    perm_seed: u64,
) -> Result<()> {
    if !checkpoint.exists() {
        bail!("missing checkpoint {}", checkpoint.display());
    }
    let header = Checkpoint::read_header(checkpoint)?;
    let base = if header.run_config.is_null() {
        RunConfig::default()
    } else {
        RunConfig::from_flat(&header.run_config)?
    };
    let cfg = config.resolve(base)?;
    let backbone: Arc<dyn Backbone> = cfg.load_backbone()?;
    let ckpt = Checkpoint::load(checkpoint, backbone.as_ref())?;
    let model = CsawModel { backbone, spec: ckpt.header.spec, params: ckpt.params };

    let x = load_image(image)?;
    let perm = sample_permutation(grid.unwrap_or(ckpt.header.train.jigsaw_grid), perm_seed)?;
    let jumbled = apply_jigsaw(&x, &perm)?;
    let x_hat = model.reconstruct_image(&model.params, &jumbled)?;
    let target = match model.spec.recon_target {
        ReconTarget::Clean => x.view(),
        ReconTarget::Jumbled => jumbled.view(),
    };
    let l2 = (&x_hat - &target).mapv(|v| v * v).sum().sqrt();

    let side = IMAGE_SIDE as u32;
    let mut canvas = image::RgbImage::new(3 * side, side);
    for (i, panel) in [x.view(), jumbled.view(), x_hat.view()].into_iter().enumerate() {
        image::imageops::replace(&mut canvas, &to_rgb8(panel), i as i64 * side as i64, 0);
    }
    canvas.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("reconstruction L2 to {} target: {l2:.4}", model.spec.recon_target);
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MakeSplits { config, data, out } => make_splits(config, data, out),
        Command::Train { config, data, alpha, epochs, backbone, resume, out } => train(
            config,
            data,
            TrainFlags { alpha: *alpha, epochs: *epochs, backbone: backbone.as_deref(), resume: *resume },
            out,
        ),
        Command::Eval { config, runs, datasets, jumble_eval, jumble_seed, report, sweep_out } => eval(
            config,
            runs,
            EvalFlags {
                datasets,
                jumble_eval: *jumble_eval,
                jumble_seed: *jumble_seed,
                report: report.as_deref(),
                sweep_out: sweep_out.as_deref(),
            },
        ),
        Command::DemoReconstruct { config, checkpoint, image, out, grid, perm_seed } => {
            demo_reconstruct(config, checkpoint, image, out, *grid, *perm_seed)
        }
        Command::Synth { out, classes, per_class, seed } => {
            let m = generate_synthetic_dataset(out, *classes, *per_class, *seed)?;
            println!("{}: {} classes, {} images", out.display(), m.num_classes(), m.samples.len());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .any(|e| e.downcast_ref::<CsawError>().is_some_and(CsawError::is_validation));
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
