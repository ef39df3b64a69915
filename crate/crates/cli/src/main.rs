//! `inflora`: run experiments, sweeps, the invariant suite and checkpoint
//! round-trips from the command line.
//!
//! Exit codes: 0 success, 1 property or run failure, 2 configuration error,
//! 3 I/O or file-format error. Log level comes from `RUST_LOG`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use inflora::checkpoint::Checkpoint;
use inflora::checks::{check_suite, Fault};
use inflora::eval::{collect_stats, ClassStats};
use inflora::experiment::{
    prepare_seed, run_experiment, sweep, sweep_csv, write_atomic, write_report, ExperimentConfig,
    SweepParam,
};
use inflora::inflora::{ContinualLearner, DesignVariant, TaskTrainConfig};
use inflora::Error;

#[derive(Parser)]
#[command(
    name = "inflora",
    version,
    about = "Interference-free low-rank adaptation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured variant and write the report files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the fixed-seed invariant suite.
    Check {
        /// Inject a known defect to see which properties catch it.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
    /// Repeat the experiment over values of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `r` or `epsilon`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write or inspect a checkpoint.
    Ckpt {
        #[command(subcommand)]
        action: CkptAction,
    },
}

#[derive(Subcommand)]
enum CkptAction {
    /// Train InfLoRA on the config's first seed and save the final state.
    Save {
        path: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Load a checkpoint, verify it re-encodes identically, print a summary.
    Load { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SkipProjection,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Io { .. } | Error::Corrupt { .. } | Error::Format(_) | Error::Parse { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> inflora::Result<u8> {
    match cmd {
        Command::Run { config, out, seeds } => run(&config, out, seeds),
        Command::Check { fault } => check(fault),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => run_sweep(&config, &param, &values, out),
        Command::Ckpt { action } => match action {
            CkptAction::Save { path, config } => ckpt_save(&path, config.as_deref()),
            CkptAction::Load { path } => ckpt_load(&path),
        },
    }
}

fn run(config: &Path, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> inflora::Result<u8> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
        cfg.validate()?;
    }
    let dir = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config {
            path: "out_dir".into(),
            msg: "no output directory (pass --out or set out_dir)".into(),
        })?;
    let report = run_experiment(&cfg)?;
    write_report(&report, &dir)?;
    for r in &report.runs {
        match &r.metrics {
            Some(m) => println!(
                "{:<14} seed {:<4} ACC_T {:.4}  averaged {:.4}  expanded params {}",
                r.label,
                r.seed,
                m.last(),
                m.averaged,
                r.expanded_params
            ),
            None => println!(
                "{:<14} seed {:<4} FAILED: {}",
                r.label,
                r.seed,
                r.failure.as_deref().unwrap_or("unknown")
            ),
        }
    }
    info!("wrote results to {}", dir.display());
    Ok(if report.failed() { 1 } else { 0 })
}

fn check(fault: Option<FaultArg>) -> inflora::Result<u8> {
    let fault = fault.map(|f| match f {
        FaultArg::SkipProjection => Fault::SkipProjection,
    });
    let results = check_suite(fault)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} properties passed",
        results.len() - failed,
        results.len()
    );
    Ok(if failed == 0 { 0 } else { 1 })
}

fn run_sweep(
    config: &Path,
    param: &str,
    values: &[f64],
    out: Option<PathBuf>,
) -> inflora::Result<u8> {
    let cfg = ExperimentConfig::load(config)?;
    let param: SweepParam = param.parse()?;
    let rows = sweep(&cfg, param, values)?;
    let table = sweep_csv(param, &rows)?;
    match out.or_else(|| cfg.out_dir.clone()) {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            write_atomic(&dir.join("sweep.csv"), table.as_bytes())?;
            info!("wrote {}", dir.join("sweep.csv").display());
        }
        None => print!("{table}"),
    }
    Ok(if rows.iter().any(|r| r.averaged_acc.is_none()) {
        1
    } else {
        0
    })
}

fn ckpt_save(path: &Path, config: Option<&Path>) -> inflora::Result<u8> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = cfg.seeds[0];
    let setup = prepare_seed(&cfg, seed)?;
    let train = TaskTrainConfig {
        variant: DesignVariant::InfLoRA,
        seed,
        ..cfg.train.clone()
    };
    let mut learner = ContinualLearner::new(setup.backbone.clone(), train, setup.seq.tasks.len())?;
    let mut stats = ClassStats::default();
    for task in &setup.seq.tasks {
        learner.train_task(task)?;
        stats.merge(collect_stats(learner.net(), &task.train)?);
    }
    let (net, memories) = learner.into_parts();
    let ck = Checkpoint {
        net,
        memories,
        stats,
    };
    ck.save(path)?;
    println!("saved {} ({} bytes)", path.display(), ck.to_bytes().len());
    Ok(0)
}

fn ckpt_load(path: &Path) -> inflora::Result<u8> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    for (i, layer) in ck.net.layers.iter().enumerate() {
        let mem = match ck.memories.get(i).and_then(Option::as_ref) {
            Some(m) => format!(
                "memory {:?}, dim M {} of {}",
                m.mode(),
                m.grad_space_dim(),
                m.ambient_dim()
            ),
            None => "no memory".to_string(),
        };
        println!(
            "layer {i}: {} -> {}, adapted {}, {mem}",
            layer.d_in(),
            layer.d_out(),
            layer.adapted
        );
    }
    println!(
        "head: {} classes; class statistics for {} classes",
        ck.net.head.classes(),
        ck.stats.classes.len()
    );
    if ck.to_bytes() != bytes {
        eprintln!("re-encoding differs from the file");
        return Ok(1);
    }
    println!("round-trip: identical");
    Ok(0)
}
