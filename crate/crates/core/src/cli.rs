//! Command-line front end. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{inspect_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
use crate::data::synth::{generate_synthetic, SynthConfig};
use crate::data::{read_prompt_file_raw, read_token_header, Dataset, FoldStrategy, PROMPT_MAGIC, TOKEN_MAGIC};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, DEFAULT_SEEDS, DEFAULT_TOLERANCE, OPS};
use crate::losses::LossConfig;
use crate::metrics::evaluate;
use crate::train::{predict_dataset, read_predictions, run_training, write_predictions, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "filmiqa", version, about = "Prompt-conditioned FiLM quality head over patch tokens")]
pub struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// K-fold training; writes histories, checkpoints and the selected model.
    Train(TrainArgs),
    /// Metrics of a checkpoint on a manifest.
    Eval(PredictArgs),
    /// Writes `id,prediction,target` for every manifest sample.
    Predict(PredictArgs),
    /// Metrics from a prediction CSV.
    Metrics {
        predictions: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        /// Restrict to these ops (default: all).
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
    },
    /// Writes a synthetic dataset with a known quality signal.
    Synth(SynthArgs),
    /// Prints the header of PTOK, TEMB or FQCK files.
    Inspect {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub prompt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub min_lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub wd: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub accum: usize,
    #[arg(long, default_value_t = 22)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_enum, default_value_t = FoldStrategy::Random)]
    pub fold_strategy: FoldStrategy,
    #[arg(long, default_value_t = 1.0)]
    pub film_strength: f64,
    #[arg(long, default_value_t = 2.0)]
    pub tau_out: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau_rank: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_rank: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda_mse: f64,
    #[arg(long, default_value_t = 64)]
    pub head_hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub fusion_hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stored in run_config.json, e.g. the reason for a non-default lr.
    #[arg(long)]
    pub note: Option<String>,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.wd,
            batch_size: self.batch,
            accum_steps: self.accum,
            epochs: self.epochs,
            folds: self.folds,
            fold_strategy: self.fold_strategy,
            seed: self.seed,
            loss: LossConfig {
                tau_rank: self.tau_rank,
                lambda_rank: self.lambda_rank,
                lambda_mse: self.lambda_mse,
            },
            tau_out: self.tau_out,
            film_strength: self.film_strength,
            head_hidden: self.head_hidden,
            fusion_hidden: self.fusion_hidden,
            note: self.note.clone(),
        }
    }
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub prompt: PathBuf,
    /// Prediction CSV (required for `predict`, optional for `eval`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the checkpoint's FiLM strength.
    #[arg(long)]
    pub film_strength: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub p: usize,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub dt: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Strength of the quality signal in the tokens.
    #[arg(long, default_value_t = 6.0)]
    pub gain: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_DOMAIN,
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(args) => train(&args, out),
        Command::Eval(args) => eval(&args, out),
        Command::Predict(args) => predict(&args, out),
        Command::Metrics { predictions } => {
            let report = evaluate(&read_predictions(&predictions)?)?;
            writeln!(out, "{report}").map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { seeds, tol, ops } => {
            let ops: Vec<&str> = if ops.is_empty() {
                OPS.to_vec()
            } else {
                ops.iter().map(String::as_str).collect()
            };
            writeln!(out, "gradcheck: seeds={seeds} tol={tol:e} step={:e}", crate::gradcheck::STEP)
                .map_err(io_err)?;
            let report = run_suite(&ops, seeds, tol)?;
            for r in &report.results {
                writeln!(out, "{r}").map_err(io_err)?;
            }
            writeln!(out, "elapsed={:.2}s", report.seconds).map_err(io_err)?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_DOMAIN })
        }
        Command::Synth(args) => synth(&args, out),
        Command::Inspect { files } => {
            for f in &files {
                inspect(f, out)?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = args.config();
    cfg.validate()?;
    writeln!(out, "config: {}", serde_json::to_string(&cfg)?).map_err(io_err)?;
    writeln!(out, "seed: {}", cfg.seed).map_err(io_err)?;
    let (cv, outputs) = run_training(&cfg, &args.manifest, &args.prompt, &args.out)?;
    for f in &cv.folds {
        let r = &f.report;
        writeln!(
            out,
            "fold {}: best_epoch={} val_loss={:.6} plcc={:.4} srocc={:.4} krocc={:.4} mae={:.4}",
            f.split.fold_index,
            f.best_epoch(),
            f.best_val_loss(),
            r.plcc,
            r.srocc,
            r.krocc,
            r.mae
        )
        .map_err(io_err)?;
    }
    writeln!(
        out,
        "selected: fold {} -> {}",
        cv.folds[cv.selected].split.fold_index,
        outputs.selected_checkpoint.display()
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

fn load_for_prediction(args: &PredictArgs) -> Result<(Checkpoint, Dataset)> {
    let mut ck = Checkpoint::load(&args.checkpoint)?;
    if let Some(s) = args.film_strength {
        ck.meta.model.film_strength = s;
    }
    let ds = Dataset::open(&args.manifest)?;
    if ds.shape.channels != ck.meta.model.channels {
        return Err(Error::config(format!(
            "manifest tokens have d={}, checkpoint expects {}",
            ds.shape.channels, ck.meta.model.channels
        )));
    }
    Ok((ck, ds))
}

fn print_model_config(ck: &Checkpoint, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "config: {}", serde_json::to_string(&ck.meta.model)?).map_err(io_err)?;
    writeln!(out, "seed: {}", ck.meta.seed).map_err(io_err)
}

fn eval(args: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let (ck, ds) = load_for_prediction(args)?;
    print_model_config(&ck, out)?;
    let samples = predict_dataset(&ck, &ds, &args.prompt)?;
    if let Some(path) = &args.out {
        write_predictions(path, &samples)?;
    }
    writeln!(out, "{}", evaluate(&samples)?).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn predict(args: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let path = args
        .out
        .as_ref()
        .ok_or_else(|| Error::Usage("predict requires --out".into()))?;
    let (ck, ds) = load_for_prediction(args)?;
    print_model_config(&ck, out)?;
    let samples = predict_dataset(&ck, &ds, &args.prompt)?;
    write_predictions(path, &samples)?;
    writeln!(out, "wrote {} predictions to {}", samples.len(), path.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = SynthConfig {
        samples: args.n,
        tokens: args.p,
        channels: args.d,
        prompt_dim: args.dt,
        noise: args.noise,
        gain: args.gain,
        seed: args.seed,
    };
    writeln!(out, "config: {}", serde_json::to_string(&cfg)?).map_err(io_err)?;
    writeln!(out, "seed: {}", cfg.seed).map_err(io_err)?;
    let res = generate_synthetic(&args.out, &cfg)?;
    writeln!(out, "manifest: {}", res.manifest_path.display()).map_err(io_err)?;
    writeln!(out, "prompt: {}", res.prompt_path.display()).map_err(io_err)?;
    writeln!(out, "alt_prompt: {}", res.alt_prompt_path.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    use std::io::Read;
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::io(path, e))?;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{}: {s}", path.display()).map_err(io_err);
    if &magic == TOKEN_MAGIC {
        let h = read_token_header(path)?;
        w(out, format!("PTOK version=1 P={} d={}", h.tokens, h.channels))
    } else if &magic == PROMPT_MAGIC {
        let z = read_prompt_file_raw(path)?;
        let norm = z.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        w(out, format!("TEMB version=1 d_t={} norm={norm:.6}", z.len()))
    } else if &magic == CHECKPOINT_MAGIC {
        let s = inspect_checkpoint(path)?;
        w(out, format!("FQCK version=1 {}", serde_json::to_string(&s.meta)?))?;
        for (name, shape) in &s.tensors {
            writeln!(out, "  {name} {shape:?}").map_err(io_err)?;
        }
        Ok(())
    } else {
        Err(crate::data::format::format_err(
            path,
            0,
            format!("unknown magic {:?}", String::from_utf8_lossy(&magic)),
        ))
    }
}
