use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fino_core::data::{collate, generate_pair, load_dataset, load_rgb, save_mask_png, save_pair, BitemporalPair, SynthConfig};
use fino_core::model::head::decide;
use fino_core::train::{evaluate, predict, train};
use fino_core::verify::{check_module, worst, MODULES};
use fino_core::{Checkpoint, FinoError, TrainConfig};
use fino_tensor::{GradCheckConfig, Tensor};

#[derive(Parser)]
#[command(name = "fino", version, about = "Bitemporal change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the A/, B/, label/ layout.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Fraction of objects that are recolored but unchanged.
        #[arg(long = "pseudo-frac", default_value_t = 0.25)]
        pseudo_frac: f64,
        /// Maximum absolute per-image brightness shift.
        #[arg(long, default_value_t = 0.1)]
        brightness: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory; step losses go to stdout as JSON lines.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the step log here instead of stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print dataset metrics as one JSON object.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long = "dump-masks")]
        dump_masks: Option<PathBuf>,
    },
    /// Predict the change mask of one image pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of: ops, backbone, cdl, bsa, rega-ccl-head, full. All when omitted.
        #[arg(long)]
        module: Option<String>,
    },
}

enum Failure {
    Invalid(String),
    Numeric(String),
}

impl From<FinoError> for Failure {
    fn from(e: FinoError) -> Self {
        if e.is_numeric() {
            Self::Numeric(e.to_string())
        } else {
            Self::Invalid(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::Invalid(e.to_string())
    }
}

fn generate(out: &Path, count: u64, size: usize, pseudo: f64, brightness: f64, seed: u64) -> Result<(), Failure> {
    let scale = size as f64 / 64.0;
    let cfg = SynthConfig {
        size,
        pseudo_fraction: pseudo,
        brightness: (-brightness, brightness),
        object_extent: (10.0 * scale, 20.0 * scale),
        seed,
        ..SynthConfig::default()
    };
    for i in 0..count {
        save_pair(out, &generate_pair(&cfg, i)?)?;
    }
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn run_train(data: &Path, config: Option<&Path>, out: &Path, log: Option<&Path>) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let pairs = load_dataset(data)?;
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut write_err = None;
    let result = train(&cfg, &pairs, |s| {
        if let Err(e) = writeln!(sink, "{}", s.to_json()) {
            write_err.get_or_insert(e);
        }
    });
    sink.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    match result {
        Ok(outcome) => {
            outcome.checkpoint.save(out)?;
            Ok(())
        }
        Err(FinoError::Diverged { step, last_good }) => {
            last_good.save(out)?;
            Err(Failure::Numeric(format!(
                "training diverged at step {step}; last good parameters saved to {}",
                out.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn run_eval(ckpt: &Path, data: &Path, threshold: Option<f64>, dump: Option<&Path>) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(ckpt)?;
    let pairs = load_dataset(data)?;
    let report = evaluate(&ckpt, &pairs, threshold.unwrap_or(ckpt.config.threshold), dump)?;
    println!("{}", report.to_json());
    Ok(())
}

fn run_predict(ckpt: &Path, a: &Path, b: &Path, out: &Path, threshold: Option<f64>) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(ckpt)?;
    let (ia, ib) = (load_rgb(a)?, load_rgb(b)?);
    let mask = Tensor::zeros(&[1, ia.shape()[1], ia.shape()[2]]);
    let pair = BitemporalPair::new("predict", ia, ib, mask)?;
    pair.ensure_stage_compatible()?;
    let (ba, bb, _) = collate(&[&pair])?;
    let prob = predict(&ckpt.params, &ckpt.config.model, &ba, &bb)?;
    let pred = decide(&prob, threshold.unwrap_or(ckpt.config.threshold))?;
    save_mask_png(&pred, out)?;
    Ok(())
}

fn run_gradcheck(module: Option<&str>) -> Result<(), Failure> {
    let modules: Vec<&str> = match module {
        Some(m) => vec![m],
        None => MODULES.to_vec(),
    };
    let cfg = GradCheckConfig::default();
    let mut failed = 0;
    for m in modules {
        for (name, report) in check_module(m, &cfg)? {
            let status = if report.passed() { "ok" } else { "FAIL" };
            let detail = worst(&report).map_or(String::new(), |w| {
                format!(" (worst {}[{}]: analytic {:.6e}, numeric {:.6e})", w.name, w.worst_index, w.analytic, w.numeric)
            });
            println!(
                "{status:4} {name}: max rel error {:.3e} over {} entries{detail}",
                report.max_rel_error(),
                report.entries_checked()
            );
            failed += usize::from(!report.passed());
        }
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient checks exceeded tolerance {}", cfg.tol)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            out,
            count,
            size,
            pseudo_frac,
            brightness,
            seed,
        } => generate(&out, count, size, pseudo_frac, brightness, seed),
        Command::Train { data, config, out, log } => run_train(&data, config.as_deref(), &out, log.as_deref()),
        Command::Eval {
            ckpt,
            data,
            threshold,
            dump_masks,
        } => run_eval(&ckpt, &data, threshold, dump_masks.as_deref()),
        Command::Predict { ckpt, a, b, out, threshold } => run_predict(&ckpt, &a, &b, &out, threshold),
        Command::Gradcheck { module } => run_gradcheck(module.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(2)
        }
    }
}
