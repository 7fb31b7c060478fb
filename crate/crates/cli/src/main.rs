//! `ledvae`: phantoms, simulation, iterative and P-VAE reconstruction, and
//! evaluation, each as one subcommand writing under `--out`.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ledvae_core::illum::PatternMode;
use ledvae_core::pipeline::{self, Overrides, PhantomKind, RunConfig};
use ledvae_core::{CoreError, ErrorClass};

#[derive(Parser)]
#[command(name = "ledvae", version, about = "Multiplexed LED-array microscopy: simulate, reconstruct, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of objects.
    #[arg(long)]
    m: Option<usize>,
    /// Shots per object.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pattern_mode: Option<PatternMode>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for object-level parallelism (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate foam phantoms.
    PhantomFoam(Common),
    /// Generate two-plane digit phantoms.
    PhantomDigits(Common),
    /// Simulate noisy multiplexed shots.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Phantom container; generated from the config when absent.
        #[arg(long)]
        phantoms: Option<PathBuf>,
    },
    /// Iterative maximum-likelihood reconstruction of every object.
    ReconIter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a P-VAE on a dataset.
    PvaeTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Posterior mean and spread of every object from a trained P-VAE.
    PvaeSample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PSNR report (and optional PNGs) of estimates against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset holding the ground truth.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        png: bool,
    },
    /// Build a dataset from raw camera frames described by a JSON manifest.
    ImportRaw {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<PatternMode, String> {
    s.parse::<PatternMode>().map_err(|e| e.to_string())
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::PhantomFoam(c) | Cmd::PhantomDigits(c) => c,
            Cmd::Simulate { common, .. }
            | Cmd::ReconIter { common, .. }
            | Cmd::PvaeTrain { common, .. }
            | Cmd::PvaeSample { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::ImportRaw { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Cmd::PhantomFoam(_) => "phantom-foam",
            Cmd::PhantomDigits(_) => "phantom-digits",
            Cmd::Simulate { .. } => "simulate",
            Cmd::ReconIter { .. } => "recon-iter",
            Cmd::PvaeTrain { .. } => "pvae-train",
            Cmd::PvaeSample { .. } => "pvae-sample",
            Cmd::Eval { .. } => "eval",
            Cmd::ImportRaw { .. } => "import-raw",
        }
    }
}

fn progress(step: usize, loss: f64, object: &str) {
    let mut err = std::io::stderr().lock();
    let _ = if object.is_empty() {
        writeln!(err, "step={step} loss={loss}")
    } else {
        writeln!(err, "step={step} loss={loss} object={object}")
    };
}

fn run(cmd: &Cmd) -> Result<(), CoreError> {
    let c = cmd.common();
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: c.seed,
        m: c.m,
        n: c.n,
        pattern_mode: c.pattern_mode,
    };
    let mut cfg = base.resolve(&overrides)?;
    if matches!(cmd, Cmd::PhantomDigits(_)) {
        cfg = RunConfig {
            phantom: PhantomKind::Digits,
            slices: None,
            ..cfg
        }
        .resolve(&Overrides::default())?;
    }
    if let Some(j) = c.jobs {
        if j == 0 {
            return Err(CoreError::config("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CoreError::config(format!("thread pool: {e}")))?;
    }
    let out = &c.out;
    cfg.snapshot(out, cmd.name())?;
    let written = match cmd {
        Cmd::PhantomFoam(_) => pipeline::run_phantoms(&cfg, PhantomKind::Foam, out)?,
        Cmd::PhantomDigits(_) => pipeline::run_phantoms(&cfg, PhantomKind::Digits, out)?,
        Cmd::Simulate { phantoms, .. } => pipeline::run_simulate(&cfg, phantoms.as_deref(), out)?,
        Cmd::ReconIter { data, .. } => pipeline::run_recon(&cfg, data, out, &progress)?,
        Cmd::PvaeTrain { data, resume, .. } => pipeline::run_train(&cfg, data, resume.as_deref(), out, &progress)?,
        Cmd::PvaeSample { data, checkpoint, .. } => pipeline::run_sample(&cfg, data, checkpoint, out)?,
        Cmd::Eval {
            truth, estimates, png, ..
        } => {
            let (path, rows) = pipeline::run_eval(truth, estimates, out, *png)?;
            println!("mean_psnr_complex={:.6}", ledvae_core::eval::mean_complex(&rows));
            path
        }
        Cmd::ImportRaw { manifest, .. } => pipeline::run_import(manifest, out)?,
    };
    println!("{}", written.display());
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error class=config: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error class={}: {msg}", class.name());
            ExitCode::from(exit_code(class))
        }
    }
}
