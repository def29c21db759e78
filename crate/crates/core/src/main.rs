use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use plume_marl::agents::AgentKind;
use plume_marl::mapfile::load_map;
use plume_marl::pipeline::{
    compare, evaluate, generate_map_set, load_map_set, load_model, render_table, save_map_set, train, write_reports,
    Hyperparameters, MapSet, Profile,
};
use plume_marl::plots::{export_learning_curve, write_scatter_csv, write_z_slice_csv};
use plume_marl::Error;

/// Multi-source plume localization with recurrent multi-agent Q-learning.
#[derive(Debug, Parser)]
#[command(name = "plume-marl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random draw of the command.
    #[arg(long)]
    seed: u64,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Settings {
    /// TOML file with every hyperparameter.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in hyperparameter set (default: desk).
    #[arg(long, value_parser = PossibleValuesParser::new(["full", "desk"]))]
    profile: Option<String>,
    /// Overrides the agent count.
    #[arg(long)]
    agents: Option<usize>,
}

const KINDS: [&str; 5] = ["drqn", "ddrqn", "adrqn", "addrqn", "random"];

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train/test map set.
    GenMaps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train one agent kind; resumes from a checkpoint found in --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        settings: Settings,
        #[arg(long, value_parser = PossibleValuesParser::new(KINDS))]
        kind: String,
        /// Map-set directory; generated from --seed into <out>/maps when absent.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Greedy evaluation of one checkpoint on the test maps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        /// Defaults to the checkpoint's configured evaluation count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate several checkpoints on one shared schedule.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Permit models trained with different agent counts.
        #[arg(long)]
        allow_mixed_agents: bool,
    },
    /// Write plot-ready CSV files.
    ExportPlots {
        #[command(flatten)]
        common: Common,
        /// Map file to slice and scatter.
        #[arg(long, requires = "z")]
        map: Option<PathBuf>,
        /// Slice height in meters.
        #[arg(long, requires = "map")]
        z: Option<f64>,
        /// Training metrics CSV to smooth.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Moving-average window in episodes.
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{} is not a readable file", path.display())))
    }
}

fn require_dir(path: &Path) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{} is not a directory", path.display())))
    }
}

fn hyperparameters(s: &Settings) -> std::result::Result<Hyperparameters, Failure> {
    let mut hp = match (&s.config, &s.profile) {
        (Some(path), _) => {
            require_file(path)?;
            Hyperparameters::load(path)?
        }
        (None, Some(p)) => Hyperparameters::profile(p.parse::<Profile>()?),
        (None, None) => Hyperparameters::desk(),
    };
    if let Some(n) = s.agents {
        hp.n_agents = n;
    }
    hp.validate()?;
    Ok(hp)
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::GenMaps { common, settings } => {
            let hp = hyperparameters(&settings)?;
            let set = generate_map_set(&hp, common.seed)?;
            save_map_set(&set, &common.out)?;
            println!(
                "wrote {} train and {} test maps to {} (digest {})",
                set.train.len(),
                set.test.len(),
                common.out.display(),
                set.digest()
            );
        }
        Command::Train {
            common,
            settings,
            kind,
            maps,
        } => {
            let hp = hyperparameters(&settings)?;
            let kind: AgentKind = kind.parse()?;
            let set: MapSet = match maps {
                Some(dir) => {
                    require_dir(&dir)?;
                    load_map_set(&dir)?
                }
                None => {
                    let set = generate_map_set(&hp, common.seed)?;
                    save_map_set(&set, &common.out.join("maps"))?;
                    set
                }
            };
            let outcome = train(&hp, &set, kind, common.seed, Some(&common.out))?;
            let last = outcome.records.len().saturating_sub(100);
            let tail = &outcome.records[last..];
            let wins = tail.iter().filter(|r| r.success).count();
            println!(
                "trained {kind}: {} episodes, {} updates, {:.1} s; last {} episodes: {wins} successes",
                outcome.records.len(),
                outcome.updates,
                outcome.wall_clock_secs,
                tail.len()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            maps,
            episodes,
        } => {
            require_dir(&checkpoint)?;
            require_dir(&maps)?;
            let set = load_map_set(&maps)?;
            let episodes = match episodes {
                Some(n) => n,
                None => load_model(&checkpoint)?.manifest.hyperparameters.eval_episodes,
            };
            let report = evaluate(&checkpoint, &set, episodes, common.seed)?;
            let hash = report.schedule_hash.clone();
            let rows = [report];
            write_reports(&common.out, &rows, &hash)?;
            print!("{}", render_table(&rows));
        }
        Command::Compare {
            common,
            checkpoints,
            maps,
            episodes,
            allow_mixed_agents,
        } => {
            for c in &checkpoints {
                require_dir(c)?;
            }
            require_dir(&maps)?;
            let set = load_map_set(&maps)?;
            let models = checkpoints.iter().map(|c| load_model(c)).collect::<plume_marl::Result<Vec<_>>>()?;
            let episodes = episodes.unwrap_or(models[0].manifest.hyperparameters.eval_episodes);
            let cmp = compare(&models, &set, episodes, common.seed, allow_mixed_agents)?;
            write_reports(&common.out, &cmp.rows, &cmp.schedule_hash)?;
            print!("{}", render_table(&cmp.rows));
            if allow_mixed_agents {
                let mut by_n: Vec<(usize, f64)> = cmp.rows.iter().map(|r| (r.n_agents, r.success_rate)).collect();
                by_n.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                let monotone = by_n.windows(2).all(|w| w[1].1 >= w[0].1);
                println!("success rate vs agent count: {}", if monotone { "monotone" } else { "not monotone" });
            }
        }
        Command::ExportPlots {
            common,
            map,
            z,
            metrics,
            window,
        } => {
            if map.is_none() && metrics.is_none() {
                return Err(Failure::Usage("export-plots needs --map/--z or --metrics".into()));
            }
            if let Some(m) = &map {
                require_file(m)?;
            }
            if let Some(m) = &metrics {
                require_file(m)?;
            }
            std::fs::create_dir_all(&common.out).map_err(Error::from)?;
            if let (Some(path), Some(z)) = (map, z) {
                let field = load_map(&path)?;
                let slice = common.out.join(format!("slice_z{z}.csv"));
                write_z_slice_csv(&field, z, &slice)?;
                let scatter = common.out.join("scatter.csv");
                write_scatter_csv(&field, &scatter)?;
                println!("wrote {} and {}", slice.display(), scatter.display());
            }
            if let Some(path) = metrics {
                let out = common.out.join("learning_curve.csv");
                let smoothed = export_learning_curve(&path, window, &out)?;
                println!("wrote {} ({} episodes)", out.display(), smoothed.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[global_allocator]
static GLOBAL: plume_marl::heap::PlainMalloc = plume_marl::heap::PlainMalloc;
