use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use copilot_core::config::ExperimentConfig;
use copilot_core::tasks::TaskKind;
use copilot_gateway::pipeline::{self, Check, HilStart, PipelineError};
use copilot_gateway::server::{self, ServeOptions};

#[derive(Parser)]
#[command(name = "copilot", version, about = "Leader-follower teleoperation and clip-based fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides the configuration document.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment configuration document (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Task id (`peg_insert` or `cube_sort`).
    #[arg(long)]
    task: Option<String>,
    /// Exit with status 3 when an acceptance threshold is missed.
    #[arg(long)]
    check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted demonstrations into a dataset.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the base policy on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Headless clip-based fine-tuning run with base vs. fine-tuned evaluation.
    Hil {
        #[command(flatten)]
        common: Common,
        /// Clips per fine-tuning round.
        #[arg(long)]
        k: Option<usize>,
        /// Fine-tuning rounds.
        #[arg(long)]
        iters: Option<usize>,
        /// Evaluation rollouts.
        #[arg(long)]
        rollouts: Option<usize>,
        /// Base dataset; requires `--policy`. Without both, base demonstrations
        /// are collected and a base policy trained first.
        #[arg(long, requires = "policy")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        policy: Option<PathBuf>,
    },
    /// Interactive WebSocket session on `/session`.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        stream_hz: Option<f64>,
    },
    /// Stage-wise evaluation of a policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Scaling precision and collection time tables.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Output dataset of a `hil` run.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Trials per scale.
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Serve(#[from] server::ServeError),
    #[error("{0}")]
    Usage(String),
}

fn load_config(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text).map_err(PipelineError::from)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.hil.seed = s;
    }
    if let Some(t) = &c.task {
        cfg.task = TaskKind::from_id(t).ok_or_else(|| CliError::Usage(format!("unknown task `{t}`")))?;
    }
    Ok(cfg)
}

fn finish(cfg: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
    cfg.validate().map_err(PipelineError::from)?;
    Ok(cfg)
}

fn out_dir(c: &Common, name: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| Path::new("out").join(name))
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let started = Instant::now();
    let ok = match cli.cmd {
        Command::Collect { common, episodes } => {
            let cfg = finish(load_config(&common)?)?;
            let out = out_dir(&common, "dataset");
            let n = episodes.unwrap_or(cfg.demos);
            let c = pipeline::collect(&cfg, n, &out)?;
            println!(
                "{} episodes, {} frames -> {}",
                c.manifest.episode_count,
                c.manifest.frame_count,
                out.display()
            );
            true
        }
        Command::Train { common, dataset } => {
            let cfg = finish(load_config(&common)?)?;
            let out = out_dir(&common, "policy");
            let (_, m) = pipeline::train(&cfg, &dataset, &out)?;
            println!("{} pairs -> {}", m.pair_count, out.join(pipeline::POLICY_FILE).display());
            true
        }
        Command::Hil {
            common,
            k,
            iters,
            rollouts,
            dataset,
            policy,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.hil.k = k.unwrap_or(cfg.hil.k);
            cfg.hil.n = iters.unwrap_or(cfg.hil.n);
            cfg.hil.m = rollouts.unwrap_or(cfg.hil.m);
            let cfg = finish(cfg)?;
            let out = out_dir(&common, "hil");
            let start = match (&dataset, &policy) {
                (Some(d), Some(p)) => HilStart::From { dataset: d, policy: p },
                _ => HilStart::Fresh,
            };
            let a = pipeline::hil(&cfg, start, &out)?;
            print!("{}", a.summary.table());
            println!(
                "{} deployments, {} clips used, {} dropped -> {}",
                a.log.rollouts.len(),
                a.dataset.clips.len(),
                a.log.dropped_clips,
                out.display()
            );
            !common.check || report(&pipeline::hil_checks(&a))
        }
        Command::Eval {
            common,
            policy,
            rollouts,
        } => {
            let cfg = finish(load_config(&common)?)?;
            let out = out_dir(&common, "eval");
            let s = pipeline::eval(&cfg, &policy, rollouts.unwrap_or(cfg.hil.m), &out)?;
            print!("{}", s.table());
            true
        }
        Command::Metrics {
            common,
            dataset,
            trials,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.scaling.trials = trials.unwrap_or(cfg.scaling.trials);
            let cfg = finish(cfg)?;
            let out = out_dir(&common, "metrics");
            let m = pipeline::metrics(&cfg, dataset.as_deref(), &out)?;
            print!("{}", m.table());
            !common.check || report(&pipeline::metrics_checks(&m))
        }
        Command::Serve {
            common,
            port,
            host,
            policy,
            stream_hz,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.stream_hz = stream_hz.unwrap_or(cfg.stream_hz);
            let cfg = finish(cfg)?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::Usage(format!("bad address {host}:{port}: {e}")))?;
            let policy = match &policy {
                Some(p) => Some(pipeline::load_policy(p)?.0),
                None => None,
            };
            let rt = tokio::runtime::Runtime::new().map_err(server::ServeError::from)?;
            rt.block_on(async {
                let s = server::serve(
                    &cfg,
                    policy,
                    addr,
                    ServeOptions {
                        stream_hz: cfg.stream_hz,
                        realtime: true,
                    },
                )
                .await?;
                println!("listening on ws://{}/session", s.local_addr());
                s.wait().await.map_err(server::ServeError::from)?;
                Ok::<_, CliError>(())
            })?;
            true
        }
    };
    log::info!("finished in {:.1} s", started.elapsed().as_secs_f64());
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
