use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kdqn_core::env::{Mode, TraceRecord};
use kdqn_core::harness::{evaluate, train, write_metrics, Ablation, Checkpoint, Metrics, RunConfig};
use kdqn_core::report::report;

#[derive(Parser)]
#[command(name = "kdqn", version, about = "Train, evaluate and report roundabout spline-network DQN agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Normal,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the ablation (full, no_inspector, no_mpc, mlp_baseline).
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "normal")]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Metrics CSV path; defaults to eval_<scenario>/metrics.csv beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curves and tables from every metrics.csv under a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a step table of a JSONL episode trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Print a run configuration preset as JSON.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seeds, ablation, episodes, output } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(a) = ablation {
                cfg.ablation = Ablation::from_name(&a).with_context(|| format!("unknown ablation {a}"))?;
            }
            if let Some(n) = episodes {
                cfg.train.total_episodes = n;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            for run in train(&cfg)? {
                let m = Metrics::final_window(&run.rows, 100);
                println!(
                    "{} seed {}: collision {:.3} speed {:.2} return {:.3} -> {}",
                    cfg.ablation.name(),
                    run.seed,
                    m.collision_rate,
                    m.mean_speed,
                    m.mean_return,
                    cfg.seed_dir(run.seed).display()
                );
            }
        }
        Command::Eval { checkpoint, scenario, episodes, out } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let (mode, name) = match scenario {
                ScenarioArg::Normal => (Mode::Normal, "normal"),
                ScenarioArg::Hard => (Mode::Hard, "hard"),
            };
            let sc = ck.scenario.clone().with_mode(mode);
            let (rows, metrics) = evaluate(&ck, &sc, episodes)?;
            let out = out.unwrap_or_else(|| {
                checkpoint.parent().unwrap_or(&PathBuf::from(".")).join(format!("eval_{name}")).join("metrics.csv")
            });
            write_metrics(&out, &rows)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Report { input, out } => {
            let files = report(&input, &out)?;
            for p in files.plots.iter().chain(&files.tables) {
                println!("{}", p.display());
            }
        }
        Command::Replay { trace } => {
            let f = fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let mut stdout = std::io::stdout().lock();
            writeln!(
                stdout,
                "{:>4} {:>6} {:>9} {:>7} {:>9} {:>9} {:>9} {:>4} {:>6}",
                "step", "time", "reward", "speed", "proposed", "executed", "mode", "nvs", "event"
            )?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: TraceRecord = serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
                let event = if r.info.collision {
                    "crash"
                } else if r.info.arrived {
                    "arrive"
                } else if r.info.truncated {
                    "limit"
                } else {
                    ""
                };
                writeln!(
                    stdout,
                    "{:>4} {:>6.1} {:>9.3} {:>7.2} {:>9} {:>9} {:>9} {:>4} {:>6}",
                    r.step,
                    r.time,
                    r.reward,
                    r.ev.speed,
                    format!("{:?}", r.info.proposed),
                    format!("{:?}", r.info.executed),
                    format!("{:?}", r.info.mode),
                    r.hdvs.len(),
                    event
                )?;
            }
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Desk => RunConfig::desk_scale(),
                Preset::Full => RunConfig::full_scale(),
            };
            if cfg.seeds.is_empty() {
                bail!("preset has no seeds");
            }
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}
