use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypr::bench::{constant_memory_violation, run_bench, BenchOptions};
use hypr::config::load_config;
use hypr::container::save_dataset;
use hypr::data::cue::{generate_cue_dataset, CueTaskSpec};
use hypr::engine::Fault;
use hypr::neuron::ModelKind;
use hypr::run::train_run;
use hypr::verify::{self, Suite, VerifyOptions};
use hypr::{HyprError, Precision};

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "hypr",
    version,
    about = "Segment-parallel approximate forward-gradient training for spiking RNNs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network described by a TOML config.
    Train(TrainArgs),
    /// Run the gradient-equivalence suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Time the engine against the step-by-step reference.
    Bench(BenchArgs),
    /// Generate and store a dataset.
    #[command(subcommand)]
    Gen(GenCmd),
}

#[derive(Args)]
struct PoolArgs {
    /// Worker threads for the engine.
    #[arg(long, env = "HYPR_WORKERS")]
    workers: Option<usize>,
}

impl PoolArgs {
    fn install(&self) -> Result<(), Failure> {
        let Some(n) = self.workers else { return Ok(()) };
        if n == 0 {
            return Err(HyprError::config("worker count must be positive").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HyprError::config(e.to_string()).into())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Directory for outputs the config leaves unnamed.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long, value_delimiter = ',')]
    model: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<usize>,
    /// Tolerance of the gradient-equivalence suites.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    suite: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately corrupt the backward recursion.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "T", value_delimiter = ',', default_value = "1024")]
    t_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "512")]
    lambda: Vec<usize>,
    /// Worker counts to sweep.
    #[arg(
        long = "workers",
        value_delimiter = ',',
        env = "HYPR_WORKERS",
        default_value = "1"
    )]
    worker_counts: Vec<usize>,
    #[arg(long, default_value = "brf")]
    model: ModelKind,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Skip timing the sequential reference.
    #[arg(long)]
    no_reference: bool,
    /// JSON-lines report file (rows also go to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenCmd {
    /// Evidence-accumulation cue task.
    Cue {
        #[arg(long, default_value_t = 200)]
        delay: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        t_pat: usize,
        #[arg(long, default_value_t = 0.5)]
        p_active: f64,
        #[arg(long, default_value = "cue.hypr")]
        out: PathBuf,
    },
}

enum Failure {
    Verify(String),
    Hypr(HyprError),
}

impl From<HyprError> for Failure {
    fn from(e: HyprError) -> Self {
        Failure::Hypr(e)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HyprError + '_ {
    move |e| HyprError::io(path, e)
}

fn create(path: &Path) -> Result<BufWriter<File>, HyprError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.config)?;
    PoolArgs {
        workers: a.pool.workers.or(cfg.workers),
    }
    .install()?;
    if let Some(s) = a.seed {
        cfg.reseed(s);
    }
    if let Some(p) = a.precision {
        cfg.precision = p;
    }
    let stem = a
        .config
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string();
    let metrics = cfg
        .metrics
        .clone()
        .unwrap_or_else(|| a.out.join(format!("{stem}.metrics.jsonl")));
    cfg.checkpoint
        .get_or_insert_with(|| a.out.join(format!("{stem}.ckpt")));
    let mut out = create(&metrics)?;
    let summary = train_run(&cfg, &mut out)?;
    out.flush().map_err(io_err(&metrics))?;
    println!(
        "best valid acc {:.4} at epoch {} after {} epochs; test acc {}",
        summary.best_valid_acc,
        summary.best_epoch,
        summary.epochs_run,
        summary.test_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    println!("metrics: {}", metrics.display());
    println!(
        "checkpoint: {}",
        cfg.checkpoint.as_ref().expect("set above").display()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    a.pool.install()?;
    let mut opts = VerifyOptions {
        tol: a.tol,
        seed: a.seed,
        fault: if a.inject_fault {
            Fault::FlipQSign
        } else {
            Fault::None
        },
        ..Default::default()
    };
    if let Some(t) = a.tol {
        if !(t > 0.0 && t.is_finite()) {
            return Err(HyprError::config(format!("--tol must be positive, got {t}")).into());
        }
    }
    if !a.model.is_empty() {
        opts.models = a.model;
    }
    if !a.lambda.is_empty() {
        opts.lambdas = a.lambda;
    }
    if !a.suite.is_empty() {
        opts.suites = a.suite;
    }
    let report = verify::run(&opts)?;
    println!("{report}");
    match report.worst_failure() {
        None => Ok(()),
        Some(r) => Err(Failure::Verify(format!(
            "worst case: {} {} relative error {:.3e} (tolerance {:.1e})",
            r.suite.name(),
            r.case,
            r.error,
            r.tol
        ))),
    }
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let opts = BenchOptions {
        t_lens: a.t_lens,
        lambdas: a.lambda,
        workers: a.worker_counts,
        model: a.model,
        width: a.width,
        d_in: a.d_in,
        reps: a.reps,
        reference: !a.no_reference,
        seed: 0,
    };
    let mut file = a.out.as_deref().map(create).transpose()?;
    let mut write_err = None;
    let rows = run_bench(&opts, |row| {
        let line = serde_json::to_string(row).expect("plain fields serialise");
        println!("{line}");
        if let (Some(f), Some(p)) = (file.as_mut(), a.out.as_deref()) {
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                write_err.get_or_insert(HyprError::io(p, e));
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some((lam, ta, ba, tb, bb)) = constant_memory_violation(&rows) {
        return Err(Failure::Verify(format!(
            "peak bytes differ at lambda {lam}: T={ta} used {ba}, T={tb} used {bb}"
        )));
    }
    Ok(())
}

fn gen(c: GenCmd) -> Result<(), Failure> {
    match c {
        GenCmd::Cue {
            delay,
            samples,
            seed,
            t_pat,
            p_active,
            out,
        } => {
            let spec = CueTaskSpec {
                n_samples: samples,
                t_pat,
                t_delay: delay,
                p_active,
                seed,
            };
            let ds = generate_cue_dataset(&spec)?;
            save_dataset(&out, &ds)?;
            println!(
                "wrote {} samples of {} steps to {}",
                ds.len(),
                spec.t_len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Gen(c) => gen(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Hypr(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
