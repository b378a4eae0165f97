//! Command-line entry points: train, eval, infer, gradcheck, ablate, synth.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cmunet::checkpoint;
use cmunet::config::RunConfig;
use cmunet::data;
use cmunet::error::{Error, Result};
use cmunet::metrics::{aggregate_runs, binarize, DatasetMetrics, SegMetrics};
use cmunet::model::{build_model, check_end_to_end, parameter_count, Model};
use cmunet::tensor::{activation, check_op, op_names, Activation, GradReport, Mode, Tape};
use cmunet::train::{ablate, evaluate_samples, train, TrainResult};

/// Finite-difference step for the end-to-end model check. Op-level checks
/// use a coarser default step (1e-3) on isolated smooth regions; the deep
/// composite needs a much smaller one so the central difference stays on
/// one side of the nearest ReLU/maxpool kink (see model::check_end_to_end).
const END_TO_END_EPS: f64 = 1e-7;
const DEFAULT_OP_EPS: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "cmunet",
    version,
    about = "Binary segmentation with a ConvMixer U-Net and multi-scale attention gates",
    after_help = "Env: CMUNET_THREADS=1 forces single-threaded reference mode.\n\
                  Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; writes checkpoints and a log.
    Train {
        /// Path to a key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's dataset root (expects images/ and masks/).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also persist Adam moments and step count in the checkpoints.
        #[arg(long)]
        with_optimizer: bool,
    },
    /// Evaluate checkpoint(s) on a dataset; repeat --checkpoint for a
    /// mean±std summary across runs.
    Eval {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment one image and write a binary 0/255 mask PNG at its
    /// original resolution.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification for each op and the
    /// downsized end-to-end model.
    Gradcheck {
        /// Op to check: one op name, "model" for end-to-end only, or "all".
        #[arg(long, default_value = "all")]
        op: String,
        /// Finite-difference step (default 1e-3 for ops, 1e-7 end-to-end).
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the three toggle variants (baseline / +convmixer /
    /// +convmixer+msag) under identical seeds and report them side by side.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic ellipse dataset (images/ and masks/ PNGs).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; --help/--version are successes.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, data, out, with_optimizer } => {
            cmd_train(&config, seed, data, out, with_optimizer)
        }
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Infer { checkpoint, image, out } => cmd_infer(&checkpoint, &image, &out),
        Command::Gradcheck { op, eps, seed } => cmd_gradcheck(&op, eps, seed),
        Command::Ablate { config, data } => cmd_ablate(&config, &data),
        Command::Synth { out, count, size, seed, channels } => {
            let samples = data::generate(count, size, seed, channels);
            data::write_dataset(&out, &samples)?;
            println!("wrote {count} samples under {}", out.display());
            Ok(())
        }
    }
}

fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    data_root: Option<PathBuf>,
    out: Option<PathBuf>,
    with_optimizer: bool,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(data_root) = data_root {
        config.data = data_root.display().to_string();
    }
    if let Some(out) = out {
        config.out = out.display().to_string();
    }
    config.validate()?;

    let samples = data::load_dataset(
        Path::new(&config.data),
        config.model.input_size,
        config.model.in_channels,
    )?;
    let out_dir = PathBuf::from(&config.out);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    println!(
        "training: {} samples, {} parameters, {} epochs, seed {}",
        samples.len(),
        parameter_count(&config.model),
        config.epochs,
        config.seed
    );

    let result: TrainResult<f32> = train(&config, &samples, with_optimizer, |row| {
        let _ = writeln!(log, "{}", row.csv());
        let _ = log.flush();
        println!(
            "epoch {:>4}  train loss {:.6}  val IoU {}  val F1 {}  {:.2}s",
            row.epoch,
            row.train_loss,
            percent(row.val_iou),
            percent(row.val_f1),
            row.wall_s
        );
    })?;

    let adam_ref = with_optimizer.then_some(&result.adam);
    let last_bytes =
        checkpoint::to_bytes(&config, config.epochs as u64, &result.model, adam_ref);
    let last_path = out_dir.join("last.ckpt");
    fs::write(&last_path, &last_bytes).map_err(|e| Error::io(&last_path, e))?;

    let best_path = out_dir.join("best.ckpt");
    match &result.best {
        Some(best) => {
            fs::write(&best_path, &best.bytes).map_err(|e| Error::io(&best_path, e))?;
            println!(
                "best epoch {}: val IoU {}, val F1 {}",
                best.epoch,
                percent(best.val_iou),
                percent(best.val_f1)
            );
        }
        // No validation signal (epochs=0 or empty val split): best == last.
        None => fs::write(&best_path, &last_bytes).map_err(|e| Error::io(&best_path, e))?,
    }
    config.save(&out_dir.join("config.conf"))?;
    println!("wrote {} and {}", best_path.display(), last_path.display());
    Ok(())
}

fn load_model_from(path: &Path) -> Result<(checkpoint::CheckpointFile, Model<f32>)> {
    let file = checkpoint::load(path)?;
    file.config.validate()?;
    let model = build_model::<f32>(&file.config.model, file.config.seed)?;
    file.apply_to_model(&model)?;
    Ok((file, model))
}

const METRIC_HEADER: &str = "IoU     Recall  Precis  F1      Acc";

fn metric_cells(iou: f64, recall: f64, precision: f64, f1: f64, accuracy: f64) -> String {
    format!(
        "{:<7} {:<7} {:<7} {:<7} {:<7}",
        percent(iou),
        percent(recall),
        percent(precision),
        percent(f1),
        percent(accuracy)
    )
}

fn cmd_eval(checkpoints: &[PathBuf], data_root: &Path) -> Result<()> {
    let mut runs: Vec<DatasetMetrics> = Vec::with_capacity(checkpoints.len());
    let per_image_report = checkpoints.len() == 1;

    for path in checkpoints {
        let (file, model) = load_model_from(path)?;
        let samples = data::load_dataset(
            data_root,
            file.config.model.input_size,
            file.config.model.in_channels,
        )?;
        let refs: Vec<&data::Sample> = samples.iter().collect();
        let (per_image, agg) = evaluate_samples(&model, &refs, file.config.threshold)?;

        if per_image_report {
            println!("{:<24} {METRIC_HEADER}", "image");
            for (id, m) in &per_image {
                println!("{id:<24} {}", segmetric_cells(m));
            }
        }
        println!(
            "{:<24} {}",
            format!("{} (n={})", path.display(), agg.images),
            metric_cells(agg.iou, agg.recall, agg.precision, agg.f1, agg.accuracy)
        );
        runs.push(agg);
    }

    if runs.len() > 1 {
        let s = aggregate_runs(&runs)?;
        println!(
            "mean over {} runs: IoU {}  Recall {}  Precision {}  F1 {}  Accuracy {}",
            s.runs,
            s.iou.percent(),
            s.recall.percent(),
            s.precision.percent(),
            s.f1.percent(),
            s.accuracy.percent()
        );
    }
    Ok(())
}

fn segmetric_cells(m: &SegMetrics) -> String {
    metric_cells(m.iou, m.recall, m.precision, m.f1, m.accuracy)
}

fn cmd_infer(checkpoint_path: &Path, image_path: &Path, out_path: &Path) -> Result<()> {
    let (file, model) = load_model_from(checkpoint_path)?;
    let size = file.config.model.input_size;
    let (image, orig_h, orig_w) =
        data::load_image(image_path, size, file.config.model.in_channels)?;

    let (x, _) = cmunet::data::stack_batch(&[(&image, &image)])?;
    let mut tape = Tape::no_grad();
    let logits = model.forward(&mut tape, &x, Mode::Eval)?;
    let probs = activation(&mut tape, &logits, Activation::Sigmoid);
    let pred = binarize(&probs, file.config.threshold);

    // Nearest-neighbor back to the original resolution; stays binary.
    let plane: Vec<f32> = pred.iter().map(|&b| b as f32).collect();
    let full = data::resize_nearest(&plane, size, size, orig_h, orig_w);
    let pixels: Vec<u8> = full.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    let mask = image::GrayImage::from_raw(orig_w as u32, orig_h as u32, pixels)
        .expect("pixel buffer matches dimensions");
    mask.save(out_path)
        .map_err(|e| Error::Data(format!("cannot write mask {}: {e}", out_path.display())))?;
    println!("wrote {} ({orig_w}x{orig_h})", out_path.display());
    Ok(())
}

fn cmd_gradcheck(op: &str, eps: Option<f64>, seed: u64) -> Result<()> {
    let mut reports: Vec<GradReport> = Vec::new();
    match op {
        "all" => {
            for name in op_names() {
                reports.push(check_op(name, eps.unwrap_or(DEFAULT_OP_EPS), seed)?);
            }
            reports.push(check_end_to_end(eps.unwrap_or(END_TO_END_EPS), seed)?);
        }
        "model" | "end-to-end" => {
            reports.push(check_end_to_end(eps.unwrap_or(END_TO_END_EPS), seed)?);
        }
        name if op_names().contains(&name) => {
            reports.push(check_op(name, eps.unwrap_or(DEFAULT_OP_EPS), seed)?);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown op '{other}'; expected one of {}, \"model\", or \"all\"",
                op_names().join(", ")
            )))
        }
    }

    println!("{:<22} {:>12} {:>10}  status", "op", "max rel err", "tolerance");
    let mut failures = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} {:>12.3e} {:>10.0e}  {status}", r.op, r.max_rel_err, r.tolerance);
        if !r.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} gradient check(s) failed")));
    }
    Ok(())
}

fn cmd_ablate(config_path: &Path, data_root: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    config.validate()?;
    let samples = data::load_dataset(
        data_root,
        config.model.input_size,
        config.model.in_channels,
    )?;

    let report = ablate::<f32>(&config, &samples, |variant, row| {
        println!(
            "[{variant}] epoch {:>4}  train loss {:.6}  val IoU {}",
            row.epoch,
            row.train_loss,
            percent(row.val_iou)
        );
    })?;

    println!(
        "{:<18} {:>12} {:>8} {:>8} {:>10}",
        "variant", "parameters", "val IoU", "val F1", "split seed"
    );
    for row in &report {
        println!(
            "{:<18} {:>12} {:>8} {:>8} {:>10}",
            row.variant,
            row.parameters,
            percent(row.val_iou),
            percent(row.val_f1),
            row.split_seed
        );
    }
    Ok(())
}
