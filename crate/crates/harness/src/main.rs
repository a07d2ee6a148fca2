//! `damavl` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use damavl_core::certify::CertifiedPolicy;
use damavl_core::eval::{cce_gap, EvalOptions, Method, Observation, Start};
use damavl_core::game::{appendix_b_game, MarkovGame};
use damavl_core::rng::substream;
use damavl_core::training::TrainingTrace;
use damavl_harness::config::ExperimentConfig;
use damavl_harness::plot::{plot_file, PlotSpec};
use damavl_harness::presets::preset;
use damavl_harness::runner::run_experiment;
use damavl_harness::{worker_count, HarnessError, Result};

#[derive(Parser)]
#[command(name = "damavl", version, about = "Delay-adaptive V-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (arm, seed) cell of an experiment.
    Train {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["fig1-left", "fig1-center", "fig1-right"])]
        preset: Option<String>,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        eval_every: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every training trace as JSON.
        #[arg(long)]
        save_traces: bool,
    },
    /// CCE-gap of a saved training trace.
    Eval {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        method: MethodArg,
        /// `appendix-b` or a game JSON file.
        #[arg(long, default_value = "appendix-b")]
        game: String,
        /// Evaluate `π^k` instead of the full output policy.
        #[arg(long)]
        episode: Option<u64>,
        #[arg(long, default_value_t = 2000)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "joint-actions")]
        observation: ObservationArg,
    },
    /// Render a gap CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long, default_value = "CCE-gap")]
        title: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObservationArg {
    JointActions,
    StatesOnly,
    Device,
}

fn load_game(spec: &str) -> Result<MarkovGame> {
    if spec == "appendix-b" {
        return Ok(appendix_b_game());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| HarnessError::io(spec, e))?;
    Ok(MarkovGame::from_json(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            preset: name,
            episodes,
            seeds,
            eval_every,
            out,
            save_traces,
        } => {
            let mut cfg = match (config, name) {
                (Some(path), _) => ExperimentConfig::load(&path)?,
                (None, Some(name)) => preset(&name)?,
                (None, None) => return Err(HarnessError::config("either --config or --preset is required")),
            };
            if let Some(k) = episodes {
                cfg.episodes = k;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(e) = eval_every {
                cfg.eval_every = e;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.save_traces |= save_traces;
            let exp = cfg.resolve()?;
            let outcome = run_experiment(&exp, &cfg.output_dir, worker_count())?;
            for r in &outcome.summaries {
                println!("{:<28} final gap {:.4}  last gap {:.4}", r.run_id, r.final_gap, r.last_gap);
            }
            println!("wrote {} ({} files)", cfg.output_dir.display(), outcome.manifest.files.len());
            Ok(())
        }
        Command::Eval {
            trace,
            method,
            game,
            episode,
            rollouts,
            seed,
            observation,
        } => {
            let text = std::fs::read_to_string(&trace).map_err(|e| HarnessError::io(&trace, e))?;
            let tr = TrainingTrace::from_json(&text)?;
            let game = load_game(&game)?;
            let cert = CertifiedPolicy::new(&tr);
            let start = match episode {
                Some(k) => Start::Episode {
                    k,
                    h: 0,
                    s: game.initial_state(),
                },
                None => Start::Output,
            };
            let opts = EvalOptions {
                observation: match observation {
                    ObservationArg::JointActions => Observation::JointActions,
                    ObservationArg::StatesOnly => Observation::StatesOnly,
                    ObservationArg::Device => Observation::Device,
                },
                ..EvalOptions::default()
            };
            let method = match method {
                MethodArg::Exact => Method::Exact,
                MethodArg::Mc => Method::MonteCarlo,
            };
            let mut rng = substream(seed, "cli-eval");
            let report = cce_gap(&cert, &game, start, method, opts, rollouts, &mut rng)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Plot { csv, out, window, title } => {
            if window == 0 {
                return Err(HarnessError::config("window: must be at least 1"));
            }
            plot_file(&csv, &out, &PlotSpec { title, window })?;
            println!("wrote {}", out.display());
            Ok(())
        }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
