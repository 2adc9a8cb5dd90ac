//! Command-line entry point: `generate`, `train`, `infer`, `eval`,
//! `baseline`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use occtrack::pipeline::commands::{cmd_eval_benchmark, cmd_eval_tracks};
use occtrack::pipeline::{cmd_baseline, cmd_generate, cmd_infer, cmd_train, ModelKind, RunConfig};
use occtrack::{Error, Result};

#[derive(Parser)]
#[command(name = "occtrack", version, about = "Offline tracklet re-identification and occlusion completion")]
struct Cli {
    /// Run configuration (JSON). Relative paths inside it are resolved
    /// against its directory. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Primary output of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scenes, fragmented test scenes and sample statistics.
    Generate,
    /// Train one network; `--out` overrides the checkpoint directory.
    Train {
        /// reid-motion, reid-map or completion.
        #[arg(long)]
        model: String,
        /// Continue from the last saved epoch.
        #[arg(long)]
        resume: bool,
    },
    /// Associate and complete tracklets.
    Infer {
        /// Scenes whose tracks are the input tracklets (default: the
        /// fragmented test scenes).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate predicted tracks against ground truth, or, without
    /// `--pred`, run the held-out benchmark of the trained models.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Constant-velocity association and linear completion on the
    /// held-out benchmark.
    Baseline,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            let base = p.parent().unwrap_or(Path::new("."));
            c.paths = c.paths.resolve(base);
            c
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let reports = cfg.paths.reports.clone();
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| reports.join(default));
    match &cli.cmd {
        Cmd::Generate => {
            if let Some(o) = &cli.out {
                cfg.paths.scenes = o.clone();
            }
            print(&cmd_generate(&cfg)?)
        }
        Cmd::Train { model, resume } => {
            let model = ModelKind::parse(model)?;
            if let Some(o) = &cli.out {
                cfg.paths.checkpoints = o.clone();
            }
            print(&cmd_train(&cfg, model, *resume)?)
        }
        Cmd::Infer { input } => print(&cmd_infer(&cfg, input.as_deref(), &out("completed_tracks.jsonl"))?),
        Cmd::Eval { pred, gt } => match pred {
            Some(p) => {
                let r = cmd_eval_tracks(&cfg, p, gt.as_deref(), &out("eval.json"))?;
                print!("{r}");
                Ok(())
            }
            None => print(&cmd_eval_benchmark(&cfg, &out("benchmark.json"))?),
        },
        Cmd::Baseline => print(&cmd_baseline(&cfg, &out("baseline.json"))?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_writer(std::io::stderr)
        .init();
    match occtrack::par::with_jobs(cli.jobs, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        1
    }
}
