//! Command-line driver: training, inference, evaluation, gradient
//! checking, synthetic data generation, and attention-map export.
//!
//! Exit codes: 0 success, 1 gradient-check failure, 2 configuration
//! error, 3 data error, 4 non-finite loss, 5 incompatible checkpoint.

use clap::{Parser, Subcommand};
use pcc_core::autodiff::{load_checkpoint, load_into};
use pcc_core::config::Config;
use pcc_core::data;
use pcc_core::error::Error;
use pcc_core::geometry::PointCloud;
use pcc_core::gradcheck;
use pcc_core::image::load_features;
use pcc_core::model::{detect_ablation, Ablation, CompletionModel, ImageBackend, Sample};
use pcc_core::synthetic::{make_synthetic, ShapeFamily};
use pcc_core::train::{
    disk_dataset, evaluate, metrics_csv, synthetic_dataset, train, ImageNeed, TrainSample,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pcc", about = "Cross-modal point cloud completion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory or generated synthetic data.
    Train {
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root: <category>/<sample>/{partial_<v>.ply, feat_<v>.pcf, gt.ply}.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generate synthetic data instead: sphere|box|cylinder|composite.
        #[arg(long)]
        synthetic: Option<String>,
        /// Output directory for checkpoint, metrics and resolved config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// none|no_local|no_mscf|no_closs|no_image.
        #[arg(long)]
        ablation: Option<String>,
        /// Extra `key=value` overrides (highest precedence).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Complete one partial cloud with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Partial input cloud (PLY).
        #[arg(long)]
        partial: PathBuf,
        /// Precomputed image features (PCF1), if the model uses them.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Output PLY path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Per-category Chamfer (×10³) and F-score table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate on held-out synthetic samples of this shape instead.
        #[arg(long)]
        synthetic: Option<String>,
        /// F-score distance threshold.
        #[arg(long, default_value_t = 0.001)]
        fscore_d: f64,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Finite-difference gradient verification over every learned block.
    Gradcheck {
        /// Problem scale; only `tiny` is defined.
        #[arg(long, default_value = "tiny")]
        scale: String,
    },
    /// Export the five attention interaction maps as PCF1 files.
    Attmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        partial: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Write a synthetic dataset tree to disk.
    Synth {
        /// sphere|box|cylinder|composite.
        #[arg(long)]
        shape: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

const EXIT_GRADCHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NONFINITE: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NONFINITE,
        Error::Data(_) | Error::Parse { .. } | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
        Error::Dimension { .. } | Error::Contract(_) => EXIT_CONFIG,
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure { code: exit_code_for(&e), message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn check_thread_cap() -> CmdResult {
    // Internal kernels run single-threaded; the cap is validated so a bad
    // value fails loudly rather than silently.
    if let Ok(v) = std::env::var("PCC_THREADS") {
        let parsed: Result<usize, _> = v.parse();
        match parsed {
            Ok(n) if n >= 1 => {}
            _ => {
                return Err(Failure {
                    code: EXIT_CONFIG,
                    message: format!("PCC_THREADS must be a positive integer, got {v:?}"),
                })
            }
        }
    }
    Ok(())
}

fn resolve_config(
    file: Option<&Path>,
    sets: &[String],
    synthetic: bool,
    seed: Option<u64>,
    epochs: Option<usize>,
    ablation: Option<&str>,
) -> Result<Config, Failure> {
    let mut cfg = if synthetic { Config::desk_scale() } else { Config::default() };
    if let Some(path) = file {
        cfg.apply_file(path).map_err(|e| Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        })?;
    }
    cfg.apply_overrides(sets).map_err(|e| Failure {
        code: EXIT_CONFIG,
        message: e.to_string(),
    })?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = ablation {
        cfg.model.ablation = Ablation::parse(a).map_err(|e| Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        })?;
    }
    cfg.sync_synthetic();
    Ok(cfg)
}

fn image_need(cfg: &Config) -> ImageNeed {
    if !cfg.model.ablation.uses_image() {
        ImageNeed::None
    } else if cfg.model.image_backend == ImageBackend::Patch {
        ImageNeed::Pixels
    } else {
        ImageNeed::Features
    }
}

fn synthetic_train_seed(seed: u64) -> u64 {
    seed.wrapping_mul(1_000_000)
}

fn synthetic_holdout_seed(seed: u64) -> u64 {
    seed.wrapping_mul(1_000_000) + 900_000
}

fn load_dataset(
    cfg: &Config,
    data: Option<&Path>,
    synthetic: Option<&str>,
    holdout: bool,
) -> Result<Vec<TrainSample>, Failure> {
    match (data, synthetic) {
        (Some(root), None) => {
            let index = data::index_dataset(root)?;
            for w in &index.warnings {
                eprintln!("warning: {w}");
            }
            Ok(disk_dataset(&index, image_need(cfg))?)
        }
        (None, Some(shape)) => {
            let mut spec = cfg.synthetic.clone();
            spec.shape = ShapeFamily::parse(shape)?;
            let (count, base) = if holdout {
                (cfg.holdout_count, synthetic_holdout_seed(cfg.train.seed))
            } else {
                (cfg.synthetic_count, synthetic_train_seed(cfg.train.seed))
            };
            Ok(synthetic_dataset(&spec, count, base)?)
        }
        (Some(_), Some(_)) => Err(Failure {
            code: EXIT_CONFIG,
            message: "pass either --data or --synthetic, not both".into(),
        }),
        (None, None) => Err(Failure {
            code: EXIT_CONFIG,
            message: "one of --data or --synthetic is required".into(),
        }),
    }
}

/// Build the model for a checkpoint: the ablation structure is read off
/// the stored parameter names, dimensions come from the config.
fn model_for_checkpoint(cfg: &mut Config, checkpoint: &Path) -> Result<CompletionModel, Failure> {
    let raw = load_checkpoint(checkpoint).map_err(|e| Failure {
        code: EXIT_CHECKPOINT,
        message: e.to_string(),
    })?;
    let names: Vec<String> = raw.iter().map(|r| r.name.clone()).collect();
    cfg.model.ablation = detect_ablation(&names);
    let model = CompletionModel::new(cfg.model.clone(), cfg.train.seed)?;
    load_into(&model.params, raw).map_err(|e| Failure {
        code: EXIT_CHECKPOINT,
        message: format!("checkpoint incompatible with the configured model: {e}"),
    })?;
    Ok(model)
}

fn load_sample(
    model: &CompletionModel,
    partial: &Path,
    features: Option<&Path>,
) -> Result<(Sample, data::Normalization), Failure> {
    let cloud = data::read_ply(partial)?;
    let (normalized, transform) = data::normalize(&cloud)?;
    let features = match (features, model.cfg.ablation.uses_image()) {
        (Some(path), true) => Some(load_features(path)?),
        (None, true) => {
            return Err(Failure {
                code: EXIT_DATA,
                message: "this checkpoint uses image features; pass --features <pcf>".into(),
            })
        }
        (_, false) => None,
    };
    Ok((Sample { partial: normalized, pixels: None, features }, transform))
}

fn cmd_train(
    config: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    synthetic: Option<String>,
    out: PathBuf,
    seed: Option<u64>,
    epochs: Option<usize>,
    ablation: Option<String>,
    sets: Vec<String>,
) -> CmdResult {
    let mut cfg = resolve_config(
        config.as_deref(),
        &sets,
        synthetic.is_some(),
        seed,
        epochs,
        ablation.as_deref(),
    )?;
    if ablation.as_deref() == Some("no_closs") {
        cfg.train.lambda_con = 0.0;
    }
    let dataset = load_dataset(&cfg, data_dir.as_deref(), synthetic.as_deref(), false)?;
    let model = CompletionModel::new(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training: {} samples, {} parameters, ablation {}",
        dataset.len(),
        model.params.scalar_count(),
        cfg.model.ablation.name()
    );
    let outcome = train(&model, &cfg.train, &dataset)?;
    // All outputs are written only after the run finishes, so a failed
    // command leaves nothing partial behind.
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    model.restore(&outcome.best_snapshot);
    model.save(&out.join("model.hgck"))?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&outcome.metrics))
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    std::fs::write(out.join("config.resolved"), cfg.render())
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    println!(
        "done: {} steps, best mean chamfer {:.6}; wrote model.hgck, metrics.csv, config.resolved",
        outcome.steps, outcome.best_cd
    );
    Ok(())
}

fn cmd_infer(
    checkpoint: PathBuf,
    partial: PathBuf,
    features: Option<PathBuf>,
    out: PathBuf,
    config: Option<PathBuf>,
    sets: Vec<String>,
) -> CmdResult {
    let mut cfg = resolve_config(config.as_deref(), &sets, false, None, None, None)?;
    let model = model_for_checkpoint(&mut cfg, &checkpoint)?;
    let (sample, transform) = load_sample(&model, &partial, features.as_deref())?;
    let output = model.forward(&sample)?;
    let completed = PointCloud::from_array(&output.completed)?;
    let denormalized = data::denormalize(&completed, &transform);
    data::write_ply(&denormalized, &out)?;
    println!("wrote {} points to {}", denormalized.len(), out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    data_dir: Option<PathBuf>,
    synthetic: Option<String>,
    fscore_d: f64,
    csv: Option<PathBuf>,
    config: Option<PathBuf>,
    sets: Vec<String>,
) -> CmdResult {
    let mut cfg = resolve_config(config.as_deref(), &sets, synthetic.is_some(), None, None, None)?;
    let model = model_for_checkpoint(&mut cfg, &checkpoint)?;
    let mut eval_cfg = cfg.clone();
    eval_cfg.model.ablation = model.cfg.ablation;
    let dataset = load_dataset(&eval_cfg, data_dir.as_deref(), synthetic.as_deref(), true)?;
    let report = evaluate(&model, &dataset, fscore_d)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.table());
    if let Some(path) = csv {
        std::fs::write(&path, report.csv()).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn cmd_gradcheck(scale: String) -> CmdResult {
    if scale != "tiny" {
        return Err(Failure {
            code: EXIT_CONFIG,
            message: format!("unknown gradcheck scale {scale:?}; only `tiny` is defined"),
        });
    }
    let report = gradcheck::run(&gradcheck::GradCheckOptions::default())?;
    print!("{}", report.text());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report.failing().iter().map(|b| b.name.clone()).collect();
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("gradient check failed for: {}", names.join(", ")),
        })
    }
}

fn cmd_attmaps(
    checkpoint: PathBuf,
    partial: PathBuf,
    features: Option<PathBuf>,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    sets: Vec<String>,
) -> CmdResult {
    let mut cfg = resolve_config(config.as_deref(), &sets, false, None, None, None)?;
    let model = model_for_checkpoint(&mut cfg, &checkpoint)?;
    let (sample, _) = load_sample(&model, &partial, features.as_deref())?;
    let output = model.forward(&sample)?;
    let Some(maps) = output.attention_maps else {
        return Err(Failure {
            code: EXIT_CONFIG,
            message: format!(
                "checkpoint with ablation {:?} has no five-way attention maps",
                model.cfg.ablation.name()
            ),
        });
    };
    // Compute every payload first, then write, so failures leave no
    // partial export behind.
    let pending: Vec<(String, Vec<usize>, Vec<f32>)> = maps
        .named()
        .iter()
        .map(|(name, map)| (format!("{name}.pcf"), map.shape().to_vec(), map.to_vec()))
        .collect();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    for (file, shape, data_vec) in &pending {
        data::write_pcf(&out_dir.join(file), shape, data_vec)?;
    }
    println!("wrote 5 attention maps to {}", out_dir.display());
    Ok(())
}

fn cmd_synth(shape: String, out: PathBuf, count: usize, seed: u64, sets: Vec<String>) -> CmdResult {
    let mut cfg = resolve_config(None, &sets, true, Some(seed), None, None)?;
    let mut spec = cfg.synthetic.clone();
    spec.shape = ShapeFamily::parse(&shape)?;
    cfg.sync_synthetic();
    let digits = count.to_string().len().max(3);
    for i in 0..count {
        let sample = make_synthetic(&spec, synthetic_train_seed(seed) + i as u64)?;
        let dir = out.join(spec.shape.name()).join(format!("s{:0digits$}", i));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        data::write_ply(&sample.complete, &dir.join("gt.ply"))?;
        data::write_ply(&sample.partial, &dir.join("partial_0.ply"))?;
        data::write_pcf(
            &dir.join("feat_0.pcf"),
            sample.features.tokens.shape(),
            &sample.features.tokens.to_vec(),
        )?;
        data::write_pcf(
            &dir.join("image_0.pcf"),
            &[sample.image.height, sample.image.width, 3],
            &sample.image.pixels,
        )?;
    }
    println!("wrote {count} samples under {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = check_thread_cap().and_then(|_| match cli.command {
        Command::Train { config, data, synthetic, out, seed, epochs, ablation, sets } => {
            cmd_train(config, data, synthetic, out, seed, epochs, ablation, sets)
        }
        Command::Infer { checkpoint, partial, features, out, config, sets } => {
            cmd_infer(checkpoint, partial, features, out, config, sets)
        }
        Command::Eval { checkpoint, data, synthetic, fscore_d, csv, config, sets } => {
            cmd_eval(checkpoint, data, synthetic, fscore_d, csv, config, sets)
        }
        Command::Gradcheck { scale } => cmd_gradcheck(scale),
        Command::Attmaps { checkpoint, partial, features, out_dir, config, sets } => {
            cmd_attmaps(checkpoint, partial, features, out_dir, config, sets)
        }
        Command::Synth { shape, out, count, seed, sets } => cmd_synth(shape, out, count, seed, sets),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
