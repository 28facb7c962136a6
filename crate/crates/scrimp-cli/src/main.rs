//! Command-line front end: map and scenario generation, training,
//! evaluation, classical planning, and the tiny optimal-makespan oracle.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scrimp::expert::{joint_bfs_optimal, prioritized_plan, JointPlan};
use scrimp::metrics::{evaluate, run_suite, EvalSuite};
use scrimp::numerics::checkpoint;
use scrimp::obs::{build_observation, DistanceField, ObsParams, PrevStep};
use scrimp::policy::{NetConfig, PolicyNet};
use scrimp::tiebreak::TieBreakConfig;
use scrimp::train::{train_loop, TrainConfig};
use scrimp::world::{
    generate_map, sample_agents, scenario_from_text, scenario_to_text, Grid, WorldState,
};

#[derive(Parser)]
#[command(name = "scrimp", about = "Multi-agent path finding simulator and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random obstacle map and print or save it.
    GenMap {
        #[arg(long, default_value_t = 10)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample start/goal pairs on an existing map.
    GenScenario {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 8)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy from a TOML config file.
    Train {
        /// TOML file mirroring the training configuration; omit for
        /// defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/default")]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override total environment steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Use the small desk-scale defaults instead of the full-size ones.
        #[arg(long, default_value_t = false)]
        desk: bool,
    },
    /// Print the default training config as TOML.
    DefaultConfig {
        #[arg(long, default_value_t = false)]
        desk: bool,
    },
    /// Evaluate a checkpoint on random instances.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        agents: usize,
        #[arg(long, default_value_t = 10)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        density: f64,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = false)]
        greedy: bool,
        /// Per-episode CSV output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch evaluation over a grid of team sizes and densities.
    Suite {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8")]
        agents: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "10")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.0")]
        densities: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = false)]
        greedy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan a scenario with the prioritized space-time planner.
    Plan {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Optimal makespan by exhaustive joint search (tiny instances only).
    Oracle {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Dump the observation tensors of one agent on a scenario (debugging).
    Obs {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        agent: usize,
        #[arg(long, default_value_t = 3)]
        fov: usize,
    },
}

fn write_or_print(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn load_map(path: &PathBuf) -> Result<Arc<Grid>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Arc::new(Grid::from_text(&text)?))
}

fn load_scenario(path: &PathBuf) -> Result<(Vec<scrimp::world::Coord>, Vec<scrimp::world::Coord>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(scenario_from_text(&text)?)
}

fn load_net(path: &PathBuf) -> Result<PolicyNet> {
    let (store, meta) = checkpoint::load(path)?;
    let config: NetConfig = serde_json::from_str(&meta)
        .map_err(|e| anyhow!("checkpoint metadata is not a network config: {e}"))?;
    Ok(PolicyNet { config, store })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenMap {
            size,
            density,
            seed,
            out,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = generate_map(size, density, &mut rng)?;
            write_or_print(&out, &grid.to_text())
        }
        Command::GenScenario {
            map,
            agents,
            seed,
            out,
        } => {
            let grid = load_map(&map)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (starts, goals) = sample_agents(&grid, agents, &mut rng)?;
            write_or_print(&out, &scenario_to_text(&starts, &goals))
        }
        Command::Train {
            config,
            out_dir,
            seed,
            steps,
            desk,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    TrainConfig::from_toml_str(&text)?
                }
                None if desk => TrainConfig::desk_scale(),
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_env_steps = s;
            }
            let summary = train_loop(&cfg, &out_dir)?;
            eprintln!(
                "trained {} env steps over {} iterations; metrics in {}",
                summary.env_steps,
                summary.iterations,
                out_dir.join("metrics.csv").display()
            );
            Ok(())
        }
        Command::DefaultConfig { desk } => {
            let cfg = if desk {
                TrainConfig::desk_scale()
            } else {
                TrainConfig::default()
            };
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
        Command::Eval {
            checkpoint,
            agents,
            size,
            density,
            episodes,
            seed,
            greedy,
            out,
        } => {
            let net = load_net(&checkpoint)?;
            let suite = EvalSuite {
                n_agents: agents,
                map_size: size,
                density,
                episodes,
                seed,
                greedy,
                ..EvalSuite::default()
            };
            let report = evaluate(&net, &suite, &TieBreakConfig::default())?;
            eprintln!(
                "SR {:.1}% | EL {:.2} +/- {:.2} | MR {:.2} | CO {:.3}%",
                report.success_rate * 100.0,
                report.el.mean,
                report.el.std,
                report.mr.mean,
                report.co.mean
            );
            write_or_print(&out, &report.to_csv())
        }
        Command::Suite {
            checkpoint,
            agents,
            sizes,
            densities,
            episodes,
            seed,
            greedy,
            out,
        } => {
            let net = load_net(&checkpoint)?;
            let mut suites = Vec::new();
            for &n in &agents {
                for &m in &sizes {
                    for &d in &densities {
                        suites.push(EvalSuite {
                            n_agents: n,
                            map_size: m,
                            density: d,
                            episodes,
                            seed,
                            greedy,
                            ..EvalSuite::default()
                        });
                    }
                }
            }
            let csv = run_suite(&net, &suites, &TieBreakConfig::default())?;
            write_or_print(&out, &csv)
        }
        Command::Plan {
            map,
            scenario,
            seed,
        } => {
            let grid = load_map(&map)?;
            let (starts, goals) = load_scenario(&scenario)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match prioritized_plan(&grid, &starts, &goals, &mut rng) {
                Some(plan) => {
                    print_plan(&plan, &grid, &starts, &goals);
                    Ok(())
                }
                None => bail!("no plan found"),
            }
        }
        Command::Oracle { map, scenario } => {
            let grid = load_map(&map)?;
            let (starts, goals) = load_scenario(&scenario)?;
            match joint_bfs_optimal(&grid, &starts, &goals)? {
                Some(makespan) => {
                    println!("optimal makespan: {makespan}");
                    Ok(())
                }
                None => bail!("instance is unsolvable"),
            }
        }
        Command::Obs {
            map,
            scenario,
            agent,
            fov,
        } => {
            let grid = load_map(&map)?;
            let (starts, goals) = load_scenario(&scenario)?;
            if agent >= starts.len() {
                bail!("agent {agent} out of range ({} agents)", starts.len());
            }
            let state = WorldState::new(grid.clone(), starts, goals)?;
            let field = DistanceField::compute(&grid, state.goals[agent]);
            let obs = build_observation(
                &state,
                agent,
                ObsParams::new(fov),
                PrevStep::default(),
                &field,
            );
            for ch in 0..obs.maps.len() / (fov * fov) {
                println!("channel {ch}:");
                for r in 0..fov {
                    let row: Vec<String> = (0..fov)
                        .map(|c| format!("{:.0}", obs.maps[(ch * fov + r) * fov + c]))
                        .collect();
                    println!("  {}", row.join(" "));
                }
            }
            println!("scalars: {:?}", obs.scalars);
            Ok(())
        }
    }
}

fn print_plan(
    plan: &JointPlan,
    grid: &Arc<Grid>,
    starts: &[scrimp::world::Coord],
    goals: &[scrimp::world::Coord],
) {
    println!("makespan: {}", plan.makespan);
    for (i, line) in plan.to_strings().iter().enumerate() {
        println!("agent {i}: {line}");
    }
    let ok = plan.validate(grid, starts, goals);
    println!("valid: {ok}");
}
