//! Command line interface: run studies, replay single episodes, validate
//! the library, and re-aggregate raw results.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use looptune::closed_loop::{initial_state, run_episode};
use looptune::mpc::ParamVector;

use looptune_cli::aggregate;
use looptune_cli::checks;
use looptune_cli::config::ExperimentConfig;
use looptune_cli::io;
use looptune_cli::study;

#[derive(Parser)]
#[command(name = "looptune", about = "Controller-tuning experiment harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured study and write raw plus aggregate outputs.
    Run {
        /// Experiment config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to $LOOPTUNE_OUT, then ./out.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of seeds.
        #[arg(long)]
        seeds: Option<u64>,
        /// Override the process-noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        /// Restrict to these methods; repeatable.
        #[arg(long)]
        method: Vec<String>,
        /// Override the worker count (0 uses every core).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run one closed-loop episode and print its trace as CSV on stdout.
    Episode {
        /// Experiment config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Task label to report the episode cost for; first task when omitted.
        #[arg(long)]
        task: Option<String>,
        /// Controller weights as five comma-separated values; nominal when
        /// omitted.
        #[arg(long)]
        theta: Option<String>,
        /// Plant noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of closed-loop steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the process-noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Run the self-contained acceptance checks.
    Validate,
    /// Re-aggregate a raw history CSV into statistics and plot data.
    Aggregate {
        /// Path to a history.csv produced by `run`.
        #[arg(long)]
        history: PathBuf,
        /// Output directory; defaults to $LOOPTUNE_OUT, then ./out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("LOOPTUNE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_files(dir: &PathBuf, files: &[(String, String)]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    for (name, body) in files {
        std::fs::write(dir.join(name), body)
            .with_context(|| format!("writing {}", dir.join(name).display()))?;
    }
    Ok(())
}

fn parse_theta(text: &str) -> anyhow::Result<ParamVector> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 5 {
        anyhow::bail!("--theta needs five comma-separated values, got {}", parts.len());
    }
    let mut values = [0.0; 5];
    for (slot, part) in values.iter_mut().zip(&parts) {
        *slot = part.trim().parse::<f64>().with_context(|| format!("parsing weight '{part}'"))?;
    }
    ParamVector::new(values).map_err(Into::into)
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Run { config, out, seeds, noise, method, workers } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(n) = noise {
                cfg.noise_std = n;
            }
            if !method.is_empty() {
                cfg.methods = method;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            let methods = cfg.methods()?;
            let outcome = study::run_study(&cfg, &methods)?;
            let files = study::study_files(&cfg, &outcome)?;
            let dir = out_dir(out);
            write_files(&dir, &files)?;
            println!(
                "completed {} of {} units, wrote {} files to {}",
                outcome.total_units - outcome.failed_units,
                outcome.total_units,
                files.len(),
                dir.display()
            );
            if outcome.failed_units * 10 > outcome.total_units {
                eprintln!(
                    "{} of {} units failed, above the 10% threshold",
                    outcome.failed_units, outcome.total_units
                );
                return Ok(2);
            }
            Ok(0)
        }
        Command::Episode { config, task, theta, seed, steps, noise } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(n) = noise {
                cfg.noise_std = n;
            }
            cfg.validate()?;
            let tasks = cfg.tasks()?;
            let task = match task {
                Some(label) => tasks
                    .iter()
                    .find(|t| t.label == label)
                    .with_context(|| format!("no task labeled '{label}' in the config"))?,
                None => &tasks[0],
            };
            let theta = match theta {
                Some(text) => parse_theta(&text)?,
                None => ParamVector::nominal(),
            };
            let steps = steps.unwrap_or(cfg.episode_steps);
            let traj =
                run_episode(&cfg.plant(), &cfg.ocp(), &theta, &initial_state(), steps, seed)?;
            print!("{}", io::trajectory_to_csv(&traj));
            let cost: f64 = traj.steps.iter().map(|s| task.stage_cost(&s.state, s.input)).sum();
            eprintln!("episode cost under {}: {cost}", task.label);
            Ok(0)
        }
        Command::Validate => {
            let checks = [
                checks::run_timed(1, "exact posterior algebra", Some(10.0), || {
                    checks::criterion_1_exact_posterior()
                }),
                checks::run_timed(2, "confidence band coverage", Some(60.0), || {
                    checks::criterion_2_band_coverage()
                }),
                checks::run_timed(3, "rollout error bounds", Some(300.0), || {
                    checks::criterion_3_rollout_bounds()
                }),
                checks::run_timed(4, "nominal stabilization and gradients", Some(30.0), || {
                    checks::criterion_4_stabilization_and_gradients()
                }),
                checks::run_timed(10, "transition growth per episode", None, || {
                    checks::criterion_10_transition_volume()
                }),
            ];
            let mut all_passed = true;
            for check in &checks {
                println!("{}", check.line());
                all_passed &= check.passed();
            }
            println!(
                "study-level checks (5-9) run in the integration suite: cargo test -p \
                 looptune-cli --test acceptance"
            );
            Ok(if all_passed { 0 } else { 1 })
        }
        Command::Aggregate { history, out } => {
            let text = std::fs::read_to_string(&history)
                .with_context(|| format!("reading {}", history.display()))?;
            let histories = io::history_from_csv(&text)?;
            let agg = aggregate::aggregate(&histories)?;
            let files = aggregate::emit_files(&agg)?;
            let dir = out_dir(out);
            write_files(&dir, &files)?;
            println!("wrote {} aggregate files to {}", files.len(), dir.display());
            Ok(0)
        }
    }
}

fn main() {
    match run(Cli::parse()) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
