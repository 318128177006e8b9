//! Command-line front end: train, eval, gradcheck, inspect.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or file error,
//! 4 numeric divergence, 5 checkpoint/model mismatch, 6 gradient check
//! failure.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::{Overrides, Precision, RunConfig};
use pvgc_core::census::count_params_flops;
use pvgc_core::checkpoint;
use pvgc_core::data::manifest::load_manifest;
use pvgc_core::data::split::stratified_split;
use pvgc_core::data::synth::synth_dataset;
use pvgc_core::data::Dataset;
use pvgc_core::error::{Error, Result};
use pvgc_core::metrics::MetricsReport;
use pvgc_core::model::{HeadKind, Model, ModelConfig};
use pvgc_core::train::{evaluate, train, TrainOutcome};
use pvgc_core::verify::{end_to_end_margin_check, registry_sweep, MODEL_GRAD_TOLERANCE, OP_GRAD_TOLERANCE};
use pvgc_core::Scalar;

#[derive(Parser)]
#[command(name = "pvgc", version, about = "KNN-graph convolution pyramid with a capsule routing head")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write history, best checkpoint, and metrics.
    Train(TrainArgs),
    /// Score a saved checkpoint on a split of its own dataset.
    Eval(EvalArgs),
    /// Finite-difference verification of every gradient rule.
    Gradcheck(GradcheckArgs),
    /// Print per-stage shapes, parameter and FLOP counts for a config.
    Inspect(InspectArgs),
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Config file (line-oriented key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set epochs=5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Architecture preset: tiny or micro.
    #[arg(long)]
    preset: Option<String>,
    /// Random seed driving init, shuffling, augmentation, and splits.
    #[arg(long)]
    seed: Option<u64>,
    /// Scalar type: f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Train on generated data instead of an image manifest.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Shorthand for --set epochs=N.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for resolved.cfg, history.tsv, best.ckpt, metrics.txt.
    #[arg(long, default_value = "pvgc-out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by train.
    checkpoint: PathBuf,
    /// Which split of the checkpoint's dataset to score.
    #[arg(long, default_value = "val")]
    split: String,
    /// Override a key of the embedded config. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Also write metrics.txt here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per op check.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Sampled coordinates per tensor in the end-to-end check.
    #[arg(long, default_value_t = 4)]
    max_coords: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Scalar type; gradient checking requires f64.
    #[arg(long)]
    precision: Option<String>,
    /// Corrupt the named op's backward rule to prove the check catches it.
    #[arg(long, hide = true, value_name = "OP")]
    inject_backward_fault: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: CommonArgs,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape { .. }
        | Error::Contract { .. }
        | Error::Domain { .. }
        | Error::Config(_)
        | Error::DegenerateGraph(_)
        | Error::DegenerateBatch(_) => 2,
        Error::Data(_)
        | Error::Io(_)
        | Error::CheckpointFormat(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointTruncated(_)
        | Error::CheckpointChecksum => 3,
        Error::NonFinite { .. } | Error::Divergence { .. } => 4,
        Error::CheckpointMismatch(_) => 5,
        Error::GradCheck { .. } => 6,
    }
}

fn main() {
    // Restore default SIGPIPE so `pvgc inspect | head` exits quietly instead
    // of panicking when the reader closes the pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    pvgc_core::configure_threads();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn overrides_from(common: &CommonArgs, epochs: Option<usize>) -> Result<Overrides> {
    let precision = match &common.precision {
        Some(p) => Some(
            Precision::parse(p).ok_or_else(|| Error::Config(format!("precision expects f32 or f64, got {p:?}")))?,
        ),
        None => None,
    };
    Ok(Overrides {
        sets: common.set.clone(),
        preset: common.preset.clone(),
        seed: common.seed,
        precision,
        synthetic: common.synthetic,
        epochs,
    })
}

fn resolve_from_args(common: &CommonArgs, epochs: Option<usize>) -> Result<RunConfig> {
    let ov = overrides_from(common, epochs)?;
    let file_text = match &common.config {
        Some(path) => Some((std::fs::read_to_string(path)?, path.display().to_string())),
        None => None,
    };
    config::resolve(file_text.as_ref().map(|(t, n)| (t.as_str(), n.as_str())), &ov)
}

/// Builds the full dataset the config describes, then its stratified
/// (train, val, test) subsets.
fn load_splits<T: Scalar>(cfg: &RunConfig) -> Result<[Dataset<T>; 3]> {
    let full: Dataset<T> = if let Some(manifest) = &cfg.manifest {
        let images = cfg.images.as_ref().ok_or_else(|| {
            Error::Config("manifest given without images: set images to the image directory".to_string())
        })?;
        let m = load_manifest(Path::new(manifest), Path::new(images))?;
        Dataset::from_manifest(&m, cfg.model.image)
    } else if cfg.synthetic {
        synth_dataset(cfg.model.classes, cfg.synthetic_per_class, cfg.model.image, cfg.seed)?
    } else {
        return Err(Error::Config("no data source: set synthetic = true or point manifest at a csv".to_string()));
    };
    if full.classes().len() != cfg.model.classes {
        return Err(Error::Config(format!(
            "model expects {} classes but the dataset vocabulary has {}",
            cfg.model.classes,
            full.classes().len()
        )));
    }
    let parts = stratified_split(full.labels(), full.classes().len(), &cfg.split_spec())?;
    let [a, b, c] = parts;
    Ok([full.subset(&a)?, full.subset(&b)?, full.subset(&c)?])
}

fn render_metrics(report: &MetricsReport, class_names: &[String]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "samples = {}", report.samples);
    let _ = writeln!(s, "accuracy = {}", report.accuracy);
    let _ = writeln!(s, "macro_f1 = {}", report.macro_f1);
    for (name, m) in class_names.iter().zip(&report.per_class) {
        let _ = writeln!(s, "class.{name}.precision = {}", m.precision);
        let _ = writeln!(s, "class.{name}.recall = {}", m.recall);
        let _ = writeln!(s, "class.{name}.f1 = {}", m.f1);
        let _ = writeln!(s, "class.{name}.degenerate = {}", m.degenerate);
    }
    for (i, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "confusion.{i} = {}", cells.join(" "));
    }
    s
}

fn render_history(history: &[pvgc_core::train::HistoryRow]) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc\n");
    for r in history {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc);
    }
    s
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_from_args(&args.common, args.epochs)?;
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => run_train::<f64>(&cfg, &args.out),
        Precision::F32 => run_train::<f32>(&cfg, &args.out),
    }
}

fn run_train<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let resolved = cfg.render();
    std::fs::write(out.join("resolved.cfg"), &resolved)?;

    let [train_set, val_set, _test] = load_splits::<T>(cfg)?;
    println!("data: {} train / {} val samples, {} classes", train_set.len(), val_set.len(), cfg.model.classes);

    let mut model = Model::<T>::new(cfg.model.clone(), cfg.seed)?;
    let outcome: TrainOutcome<T> = train(&mut model, &train_set, &val_set, &cfg.train)?;

    for r in &outcome.history {
        println!(
            "epoch {:>4}  train loss {:.6}  acc {:.4}  val loss {:.6}  acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    std::fs::write(out.join("history.tsv"), render_history(&outcome.history))?;
    checkpoint::save(
        &out.join("best.ckpt"),
        &outcome.best_params,
        &outcome.best_opt,
        &resolved,
        outcome.best_epoch as u64,
        cfg.seed,
    )?;
    if let Some(report) = &outcome.best_val {
        std::fs::write(out.join("metrics.txt"), render_metrics(report, val_set.classes()))?;
        println!("best epoch {} with validation accuracy {}", outcome.best_epoch, report.accuracy);
    } else {
        println!("zero-epoch run: wrote the initial checkpoint, no validation metrics");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let ov = Overrides { sets: args.set.clone(), ..Overrides::default() };
    let cfg = config::resolve(Some((&ckpt.config_text, "checkpoint config")), &ov)?;
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => run_eval::<f64>(&cfg, &ckpt, &args),
        Precision::F32 => run_eval::<f32>(&cfg, &ckpt, &args),
    }
}

fn run_eval<T: Scalar>(cfg: &RunConfig, ckpt: &checkpoint::Checkpoint, args: &EvalArgs) -> Result<()> {
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.seed)?;
    ckpt.apply(model.params_mut())?;

    let splits = load_splits::<T>(cfg)?;
    let (ds, name) = match args.split.as_str() {
        "train" => (&splits[0], "train"),
        "val" => (&splits[1], "val"),
        "test" => (&splits[2], "test"),
        other => return Err(Error::Config(format!("unknown split {other:?}, expected train, val, or test"))),
    };
    let (loss, report) = evaluate(&model, ds, cfg.train.loss, cfg.train.batch_size)?;

    println!("split {name}: {} samples from checkpoint epoch {}", ds.len(), ckpt.epoch);
    println!("loss = {loss}");
    print!("{}", render_metrics(&report, ds.classes()));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.txt"), render_metrics(&report, ds.classes()))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if let Some(p) = &args.precision {
        if Precision::parse(p) != Some(Precision::F64) {
            return Err(Error::Config(format!("gradient checking runs in f64, got {p:?}")));
        }
    }
    let seed = args.seed.unwrap_or(0);
    let fault = args.inject_backward_fault.as_deref().map(|op| (op, 1.5));
    let rows = registry_sweep(args.instances, seed, fault)?;
    for (name, err) in &rows {
        println!("op {name:<18} max relative error {err:.3e}");
    }
    let model_err = end_to_end_margin_check(args.max_coords, seed)?;
    println!("model end-to-end     max relative error {model_err:.3e}");

    if let Some((name, err)) = rows.iter().find(|(_, e)| *e > OP_GRAD_TOLERANCE) {
        return Err(Error::GradCheck { op: name.to_string(), err: *err, tol: OP_GRAD_TOLERANCE });
    }
    if model_err > MODEL_GRAD_TOLERANCE {
        return Err(Error::GradCheck { op: "model end-to-end".to_string(), err: model_err, tol: MODEL_GRAD_TOLERANCE });
    }
    println!("gradient check passed: {} ops and the end-to-end model", rows.len());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let cfg = resolve_from_args(&args.common, None)?;
    cfg.model.validate()?;

    println!(
        "input {0}x{0}x{1}, {2} classes, K = {3}, {4} heads",
        cfg.model.image, cfg.model.in_channels, cfg.model.classes, cfg.model.k, cfg.model.heads
    );
    println!("stage schedule:");
    let mut extent = cfg.model.image / 4;
    for (i, st) in cfg.model.stages.iter().enumerate() {
        println!("  stage {}: {extent}x{extent} grid, {} nodes, dim {}, depth {}", i + 1, extent * extent, st.dim, st.depth);
        extent /= 2;
    }

    for head in [HeadKind::Capsule, HeadKind::Pooling] {
        let mut mc: ModelConfig = cfg.model.clone();
        mc.head = head;
        let census = count_params_flops(&mc)?;
        let label = match head {
            HeadKind::Capsule => "capsule head",
            HeadKind::Pooling => "pooling head",
        };
        println!("{label}:");
        for row in &census.rows {
            println!("  {:<12} {:>12} params {:>16} flops", row.name, row.params, row.flops);
        }
        println!(
            "  {:<12} {:>12} params {:>16} flops ({:.3}M params, {:.3}G flops)",
            "total",
            census.params_total,
            census.flops_total,
            census.params_total as f64 / 1e6,
            census.flops_total as f64 / 1e9
        );
    }
    Ok(())
}
