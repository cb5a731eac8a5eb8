use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevdrive::autodiff::OpKind;
use bevdrive::simworld::{Congestion, MapKey};
use bevdrive_cli::commands::*;
use bevdrive_cli::{AgentKind, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "bevdrive", version, about = "Train, evaluate and inspect BEV driving agents")]
struct Cli {
    /// Overrides every seed the command uses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent with PPO.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        agent: AgentKind,
        /// Continue from a checkpoint of the same agent.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory (default: <run.output_dir>/<agent>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints over maps and congestion levels.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Take the eval section from this file instead of the first checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        maps: Option<Vec<u8>>,
        #[arg(long, value_delimiter = ',')]
        congestion: Option<Vec<String>>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Train a segmentation decoder on a BEV agent's grids.
    TrainSeg {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep the SC Block fixed and train the decoder only.
        #[arg(long)]
        frozen: bool,
        /// Dataset file; collected and written there when missing.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "seg.bevd")]
        out: PathBuf,
    },
    /// Write ground-truth/prediction mask images for fresh frames.
    ExportMasks {
        /// Segmentation checkpoint from `train-seg`.
        #[arg(long)]
        seg: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value = "masks")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Time the splat and the SC Block forward pass; prints CSV.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Splat point counts.
        #[arg(long, value_delimiter = ',', default_value = "100000,200000,400000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Print a complete configuration with every default filled in.
    Config {
        /// The small desk-scale preset instead of the full-size defaults.
        #[arg(long)]
        desk: bool,
    },
    /// Record one episode as line-delimited JSON.
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        map: u8,
        #[arg(long, default_value = "low")]
        congestion: String,
        #[arg(long, default_value = "trace.jsonl")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn congestion_list(items: &[String]) -> Result<Vec<Congestion>, CliError> {
    items.iter().map(|s| s.parse().map_err(|e: bevdrive::simworld::SimError| CliError::Config(e.to_string()))).collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Train { config, agent, resume, out } => {
            let cfg = load_config(Some(&config), seed)?;
            let dir = out.unwrap_or_else(|| cfg.run.output_dir.join(format!("{}-seed{}", agent.name(), cfg.run.seed)));
            let outcome = cmd_train(&cfg, agent, resume.as_deref(), &dir, &mut |r| {
                let ret = r.mean_return.map_or("-".to_string(), |v| format!("{v:.1}"));
                eprintln!("update {} steps {} return {ret} kl {:.4} entropy {:.3}", r.update, r.env_steps, r.kl, r.entropy);
            })?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Eval { checkpoints, config, maps, congestion, episodes, out } => {
            let mut section = match config {
                Some(p) => RunConfig::load(&p)?.eval,
                None => load_policy(&checkpoints[0], None)?.cfg.eval,
            };
            if let Some(m) = maps {
                section.maps = m;
            }
            if let Some(c) = congestion {
                section.congestion = congestion_list(&c)?;
            }
            if let Some(e) = episodes {
                section.episodes = e;
            }
            if let Some(s) = seed {
                section.seed_base = s;
            }
            let rows = cmd_eval(&checkpoints, &section, &out)?;
            for r in rows.iter().filter(|r| r.map_id == eval::MapId::Avg) {
                println!(
                    "{} avg {}: collision {:.3} similarity {:.3} timesteps {:.2} waypoint distance {:.2}",
                    r.agent, r.congestion, r.collision_rate, r.similarity, r.timesteps, r.waypoint_distance
                );
            }
            let agents: Vec<&str> = rows.iter().map(|r| r.agent.as_str()).collect();
            for (cand, base) in [("bev6", "drl"), ("bev3", "drl"), ("bev6", "drl_pan")] {
                if agents.contains(&cand) && agents.contains(&base) {
                    println!("{}", eval::compare_agents(&rows, cand, base)?.summary());
                }
            }
        }
        Command::TrainSeg { checkpoint, frozen, dataset, out } => {
            let report = cmd_train_seg(&checkpoint, None, frozen, dataset.as_deref(), &out, seed.unwrap_or(0))?;
            for e in &report.curve {
                println!("epoch {} train {:.4} held-out {:.4}", e.epoch, e.train, e.heldout);
            }
            println!("held-out IoU background {:.3} road {:.3} vehicle {:.3}", report.iou[0], report.iou[1], report.iou[2]);
        }
        Command::ExportMasks { seg, frames, out } => {
            let rows = cmd_export_masks(&seg, frames, &out, seed.unwrap_or(0))?;
            println!("wrote {} images and manifest.csv to {}", rows.len(), out.display());
        }
        Command::Gradcheck { inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| CliError::Config(format!("unknown op `{name}`")))?),
                None => None,
            };
            let reports = cmd_gradcheck(seed.unwrap_or(0), fault);
            let mut failed = Vec::new();
            for r in &reports {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                println!("{:<20} max rel err {:.3e}  {verdict}", r.name, r.max_rel_err());
                if !r.passed() {
                    failed.push(format!("{} ({:.3e})", r.name, r.max_rel_err()));
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Gradcheck(failed.join(", ")));
            }
        }
        Command::Bench { config, sizes, repeats } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let rows = cmd_bench(&cfg, &sizes, repeats, cfg.run.seed)?;
            write_bench_csv(&rows, std::io::stdout().lock())?;
        }
        Command::Config { desk } => {
            let mut cfg = if desk { RunConfig::desk() } else { RunConfig::default() };
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            print!("{}", cfg.to_toml());
        }
        Command::Trace { checkpoint, map, congestion, out } => {
            let cfg = RunConfig::default();
            let map = MapKey::Town(map);
            map.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let c = congestion.parse().map_err(|e: bevdrive::simworld::SimError| CliError::Config(e.to_string()))?;
            let steps = cmd_trace(checkpoint.as_deref(), &cfg, map, c, seed.unwrap_or(0), &out)?;
            println!("{steps} steps written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
