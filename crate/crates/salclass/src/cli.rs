//! Command-line plumbing: dataset synthesis, training, evaluation, map
//! export and the human baseline. Settings resolve as flags > config file
//! > defaults and the effective values are printed at startup.

use crate::checkpoint::{Checkpoint, TrainLog};
use crate::classifier::ClassifierConfig;
use crate::data::{synth_dataset, AugmentConfig, Manifest, Sample, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, human_baseline, EvalItem, MetricReport, SaucConfig};
use crate::model::SalClassNet;
use crate::saliency::{SaliencyMap, SaliencyNetConfig};
use crate::tensor::{BatchNormMode, Graph, Tensor};
use crate::train::{restore_model, ModelSelection, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "salclass", version, about = "Saliency-driven classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic fixation dataset with a manifest.
    Synth(SynthArgs),
    /// Train the joint model on a manifest.
    Train(TrainArgs),
    /// Score a trained model on the test split.
    Eval(EvalArgs),
    /// Write predicted and ground-truth maps as PGM + 16-bit PNG.
    ExportMaps(EvalArgs),
    /// Score the ground-truth maps against their own fixations.
    HumanBaseline(BaselineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for images, fixations and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub per_class: usize,
    /// Square image extent in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Base learning rate (pretrained group).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate for freshly initialized parameters.
    #[arg(long)]
    pub lr_fresh: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Architecture preset: desk | desk-narrow.
    #[arg(long)]
    pub preset: Option<String>,
    /// Resume from a previously written last.ckpt.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Heatmap Gaussian sigma in pixels (default 0.035 x short side).
    #[arg(long)]
    pub sigma_px: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint written by `train` (best.ckpt or last.ckpt).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub sigma_px: Option<f64>,
    /// Number of negative-set subsamples for shuffled AUC.
    #[arg(long)]
    pub sauc_splits: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma_px: Option<f64>,
    #[arg(long)]
    pub sauc_splits: Option<usize>,
}

// ------------------------------------------------------------- settings

/// Resolved run settings; every field has a default, a config-file key
/// and (for most) a CLI flag.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub alpha: f64,
    pub lr: f64,
    /// Defaults to the base lr; the full-scale 0.05 only makes sense
    /// when most of the model starts from pretrained weights.
    pub lr_fresh: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub preset: String,
    pub sigma_px: Option<f64>,
    pub sauc_splits: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            alpha: 0.2,
            lr: 0.001,
            lr_fresh: None,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 16,
            patience: 10,
            max_epochs: 100,
            preset: "desk".into(),
            sigma_px: None,
            sauc_splits: 100,
        }
    }
}

impl Settings {
    /// Applies `key=value` lines from a config file. Unknown keys are
    /// rejected; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (li, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: li + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value)
                .map_err(|e| err(format!("{e}")))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr-fresh" => self.lr_fresh = Some(num(key, value)?),
            "momentum" => self.momentum = num(key, value)?,
            "weight-decay" => self.weight_decay = num(key, value)?,
            "batch-size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max-epochs" => self.max_epochs = num(key, value)?,
            "preset" => self.preset = value.to_string(),
            "sigma-px" => self.sigma_px = Some(num(key, value)?),
            "sauc-splits" => self.sauc_splits = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn print(&self) {
        println!(
            "settings: seed={} alpha={} lr={} lr-fresh={} momentum={} weight-decay={} \
             batch-size={} patience={} max-epochs={} preset={} sigma-px={} sauc-splits={}",
            self.seed,
            self.alpha,
            self.lr,
            self.lr_fresh
                .map(|s| s.to_string())
                .unwrap_or_else(|| "auto".into()),
            self.momentum,
            self.weight_decay,
            self.batch_size,
            self.patience,
            self.max_epochs,
            self.preset,
            self.sigma_px
                .map(|s| s.to_string())
                .unwrap_or_else(|| "auto".into()),
            self.sauc_splits,
        );
    }

    pub fn configs(&self, n_classes: usize) -> Result<(SaliencyNetConfig, ClassifierConfig)> {
        match self.preset.as_str() {
            "desk" => Ok((
                SaliencyNetConfig::desk(),
                ClassifierConfig::desk(n_classes, 4),
            )),
            "desk-narrow" => Ok((
                SaliencyNetConfig::desk_narrow(),
                ClassifierConfig::desk_narrow(n_classes, 4),
            )),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or desk-narrow)"
            ))),
        }
    }

    pub fn train_config(&self, image_size: usize) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            base_lr: self.lr,
            lr_fresh: self.lr_fresh.unwrap_or(self.lr),
            lr_pretrained: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            decay_constant: 1e-5,
            patience_epochs: self.patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            selection: ModelSelection::Mca,
            augment: AugmentConfig::identity(image_size),
            improvement_tol: 1e-6,
        }
    }
}

fn resolve_train(args: &TrainArgs) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        s.apply_file(path)?;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.alpha {
        s.alpha = v;
    }
    if let Some(v) = args.lr {
        s.lr = v;
    }
    if let Some(v) = args.lr_fresh {
        s.lr_fresh = Some(v);
    }
    if let Some(v) = args.momentum {
        s.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        s.weight_decay = v;
    }
    if let Some(v) = args.batch_size {
        s.batch_size = v;
    }
    if let Some(v) = args.patience {
        s.patience = v;
    }
    if let Some(v) = args.max_epochs {
        s.max_epochs = v;
    }
    if let Some(v) = &args.preset {
        s.preset = v.clone();
    }
    if let Some(v) = args.sigma_px {
        s.sigma_px = Some(v);
    }
    Ok(s)
}

fn resolve_eval(args: &EvalArgs) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        s.apply_file(path)?;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = &args.preset {
        s.preset = v.clone();
    }
    if let Some(v) = args.sigma_px {
        s.sigma_px = Some(v);
    }
    if let Some(v) = args.sauc_splits {
        s.sauc_splits = v;
    }
    if let Some(v) = args.batch_size {
        s.batch_size = v;
    }
    Ok(s)
}

fn resolve_baseline(args: &BaselineArgs) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        s.apply_file(path)?;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.sigma_px {
        s.sigma_px = Some(v);
    }
    if let Some(v) = args.sauc_splits {
        s.sauc_splits = v;
    }
    Ok(s)
}

// ------------------------------------------------------------- commands

pub fn run(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::ExportMaps(args) => cmd_export_maps(&args),
        Command::HumanBaseline(args) => cmd_human_baseline(&args),
    }
}

/// `SALCLASS_THREADS` caps worker parallelism.
fn init_thread_pool() -> Result<()> {
    if let Ok(v) = std::env::var("SALCLASS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("bad SALCLASS_THREADS value {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("SALCLASS_THREADS must be at least 1".into()));
        }
        // ignore the error if a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(args.classes, args.per_class, args.size, args.seed);
    let manifest = synth_dataset(&cfg, &args.out)?;
    println!(
        "synth: {} classes, {} train / {} val / {} test samples -> {}",
        manifest.classes.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        args.out.join("manifest.tsv").display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let settings = resolve_train(args)?;
    settings.print();
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;

    let manifest = Manifest::load(&args.manifest)?;
    let train_set = manifest.load_split(Split::Train, settings.sigma_px)?;
    let val_set = manifest.load_split(Split::Val, settings.sigma_px)?;
    let size = image_size(&train_set)?;

    let (sal_cfg, cls_cfg) = settings.configs(manifest.classes.len())?;
    if sal_cfg.input_size != size {
        return Err(Error::Config(format!(
            "preset {} expects {}x{} inputs, manifest images are {}x{}",
            settings.preset, sal_cfg.input_size, sal_cfg.input_size, size, size
        )));
    }
    let model = SalClassNet::build(sal_cfg, cls_cfg, settings.seed)?;
    let mut trainer = Trainer::new(model, settings.train_config(size))?;

    let log_path = args.out.join("train.csv");
    let mut log = if let Some(resume) = &args.resume {
        let ckpt = Checkpoint::load(resume)?;
        trainer.restore(&ckpt)?;
        println!(
            "resumed from {} at epoch {}, iteration {}",
            resume.display(),
            trainer.state.scalars.epoch,
            trainer.state.scalars.iteration
        );
        TrainLog::append(&log_path)?
    } else {
        TrainLog::create(&log_path)?
    };

    let reports = trainer.train(&train_set, &val_set, Some(&mut log))?;
    trainer.save_checkpoint(&args.out.join("last.ckpt"))?;
    save_best(&trainer, &args.out.join("best.ckpt"))?;

    if let Some(last) = reports.last() {
        println!(
            "done after {} epochs: val MCA {:.4}, val MSE {:.6} (best MCA {:.4}, best MSE {:.6})",
            trainer.state.scalars.epoch,
            last.val_mca,
            last.val_mse,
            trainer.state.scalars.best_val_mca,
            trainer.state.scalars.best_val_mse
        );
    }
    Ok(())
}

/// Writes the best snapshot as a standalone `model.`-prefixed checkpoint
/// so `eval` can load it like any other.
fn save_best(trainer: &Trainer, path: &Path) -> Result<()> {
    let Some(best) = &trainer.state.best else {
        return Err(Error::Checkpoint("training produced no best snapshot".into()));
    };
    let ckpt = Checkpoint {
        tensors: best
            .iter()
            .map(|(n, t)| (format!("model.{n}"), t.clone()))
            .collect(),
        state: trainer.state.scalars.clone(),
    };
    ckpt.save(path)
}

fn image_size(samples: &[Sample]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty split".into()))?;
    let (h, w) = (first.image.shape[1], first.image.shape[2]);
    if h != w {
        return Err(Error::Config(format!(
            "expected square images, got {h}x{w}"
        )));
    }
    Ok(h)
}

/// Runs the model over samples in eval mode and returns one full-size
/// predicted map per sample.
pub fn predict_maps(
    model: &mut SalClassNet,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<SaliencyMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let (h, w) = (chunk[0].image.shape[1], chunk[0].image.shape[2]);
        let mut data = Vec::with_capacity(b * 3 * h * w);
        for s in chunk {
            data.extend_from_slice(&s.image.data);
        }
        let images = Tensor::new(&[b, 3, h, w], data)?;
        let mut g = Graph::new();
        let x = g.leaf(&images);
        let fwd = model.forward(&mut g, x, BatchNormMode::Eval)?;
        let full = g.data(fwd.full);
        for i in 0..b {
            out.push(SaliencyMap::new(
                h,
                w,
                full[i * h * w..(i + 1) * h * w].to_vec(),
            )?);
        }
    }
    Ok(out)
}

fn load_eval_items(
    args: &EvalArgs,
    settings: &Settings,
) -> Result<(Vec<EvalItem>, Vec<Sample>)> {
    let manifest = Manifest::load(&args.manifest)?;
    let test_set = manifest.load_split(Split::Test, settings.sigma_px)?;
    if test_set.is_empty() {
        return Err(Error::Contract("manifest has no test split".into()));
    }
    let size = image_size(&test_set)?;

    let (sal_cfg, cls_cfg) = settings.configs(manifest.classes.len())?;
    if sal_cfg.input_size != size {
        return Err(Error::Config(format!(
            "preset {} expects {}x{} inputs, manifest images are {}x{}",
            settings.preset, sal_cfg.input_size, sal_cfg.input_size, size, size
        )));
    }
    let mut model = SalClassNet::build(sal_cfg, cls_cfg, settings.seed)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    restore_model(&mut model, &ckpt, "model.")?;

    let predicted = predict_maps(&mut model, &test_set, settings.batch_size)?;
    let items = test_set
        .iter()
        .zip(predicted)
        .map(|(s, p)| EvalItem {
            image_id: s.image_id.clone(),
            predicted: p,
            ground_truth: s.heatmap.clone(),
            fixations: s.fixations.clone(),
        })
        .collect();
    Ok((items, test_set))
}

fn write_report(report: &MetricReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let per_image: Vec<serde_json::Value> = report
        .per_image
        .iter()
        .map(|s| {
            serde_json::json!({
                "image_id": s.image_id,
                "s_auc": s.s_auc,
                "nss": s.nss,
                "cc": s.cc,
            })
        })
        .collect();
    let json = serde_json::json!({
        "mean_s_auc": report.mean_s_auc,
        "mean_nss": report.mean_nss,
        "mean_cc": report.mean_cc,
        "skipped_s_auc": report.skipped_s_auc,
        "skipped_nss": report.skipped_nss,
        "skipped_cc": report.skipped_cc,
        "per_image": per_image,
    });
    let json_path = out_dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&json).unwrap())
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok(())
}

fn print_means(report: &MetricReport) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "mean s-AUC {}, mean NSS {}, mean CC {} ({} images; skipped s-AUC {}, NSS {}, CC {})",
        fmt(report.mean_s_auc),
        fmt(report.mean_nss),
        fmt(report.mean_cc),
        report.per_image.len(),
        report.skipped_s_auc,
        report.skipped_nss,
        report.skipped_cc
    );
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let settings = resolve_eval(args)?;
    settings.print();
    let (items, _) = load_eval_items(args, &settings)?;
    let sauc = SaucConfig {
        n_splits: settings.sauc_splits,
        rng_seed: settings.seed,
    };
    let report = evaluate(&items, &sauc);
    write_report(&report, &args.out)?;
    print_means(&report);
    Ok(())
}

pub fn cmd_export_maps(args: &EvalArgs) -> Result<()> {
    let settings = resolve_eval(args)?;
    settings.print();
    let (items, _) = load_eval_items(args, &settings)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    for item in &items {
        let pred = item.predicted.normalize();
        let gt = item.ground_truth.normalize();
        let base = args.out.join(&item.image_id);
        let with = |suffix: &str, ext: &str| {
            let mut p = base.clone();
            p.set_file_name(format!("{}{}.{}", item.image_id, suffix, ext));
            p
        };
        crate::imageio::write_pgm(&with("_pred", "pgm"), &pred)?;
        crate::imageio::write_png16(&with("_pred", "png"), &pred)?;
        crate::imageio::write_pgm(&with("_gt", "pgm"), &gt)?;
        crate::imageio::write_png16(&with("_gt", "png"), &gt)?;
    }
    println!("wrote {} map pairs to {}", items.len(), args.out.display());
    Ok(())
}

pub fn cmd_human_baseline(args: &BaselineArgs) -> Result<()> {
    let settings = resolve_baseline(args)?;
    settings.print();
    let manifest = Manifest::load(&args.manifest)?;
    let test_set = manifest.load_split(Split::Test, settings.sigma_px)?;
    if test_set.is_empty() {
        return Err(Error::Contract("manifest has no test split".into()));
    }
    let items: Vec<EvalItem> = test_set
        .iter()
        .map(|s| EvalItem {
            image_id: s.image_id.clone(),
            predicted: s.heatmap.clone(),
            ground_truth: s.heatmap.clone(),
            fixations: s.fixations.clone(),
        })
        .collect();
    let sauc = SaucConfig {
        n_splits: settings.sauc_splits,
        rng_seed: settings.seed,
    };
    let report = human_baseline(&items, &sauc);
    write_report(&report, &args.out)?;
    print_means(&report);
    Ok(())
}

/// Maps an error to the process exit code: numerical failures are 2,
/// everything else (usage, IO, parse, shape) is 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Degenerate(_) => 2,
        _ => 1,
    }
}
