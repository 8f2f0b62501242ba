use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fjsp_core::features::build_bundle;
use fjsp_core::oracle::{solve_exact, SearchBudget};
use fjsp_core::{FjspInstance, Generator, ScheduleState};
use fjsp_dan::checkpoint::load_sidecar;
use fjsp_dan::train::{train, TrainConfig};
use fjsp_dan::{load_policy, Policy, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{generate_dataset, instance_name, list_dataset, load_best_known, load_instance, sha256_bytes, sha256_file, MANIFEST};
use crate::policy::{solve, PolicySpec};
use crate::report::{EvalReport, EvalRow, Provenance};

#[derive(Debug, Parser)]
#[command(name = "fjsp", version, about = "Flexible job-shop scheduling with a dual attention policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (.fjs + .json per instance, plus a manifest).
    Generate {
        #[arg(long)]
        generator: Generator,
        #[arg(long)]
        jobs: usize,
        #[arg(long)]
        machines: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve instances with one policy.
    Solve {
        #[arg(required = true)]
        instances: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        /// Policy: fifo, mopnr, spt, mwkr, random or a checkpoint path.
        #[arg(long)]
        policy: String,
        /// Write one Gantt CSV per instance here.
        #[arg(long)]
        gantt_dir: Option<PathBuf>,
        /// Write one replayable action trace (JSON) per instance here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Write rows.csv, summary.csv and report.json here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate policies on a dataset directory against a reference.
    Eval {
        dataset: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Repeatable.
        #[arg(long = "policy", required = true)]
        policies: Vec<String>,
        /// `oracle` or a CSV file with columns instance,best_known.
        #[arg(long)]
        reference: Option<String>,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy from a TOML or JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted run in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Exact makespan of tiny instances.
    Oracle {
        #[arg(required = true)]
        instances: Vec<PathBuf>,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        gantt_dir: Option<PathBuf>,
    },
    /// Model inspection.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// Feature inspection.
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
    /// Training configuration helpers.
    Config {
        #[command(subcommand)]
        command: ConfigCommand,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "greedy")]
    pub strategy: Strategy,
    /// Sampled rollouts per instance for the sample strategy.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Required for stochastic runs.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[arg(long, default_value_t = 50_000_000)]
    pub node_budget: u64,
    /// Seconds.
    #[arg(long, default_value_t = 60.0)]
    pub time_budget: f64,
}

impl BudgetArgs {
    fn budget(&self) -> SearchBudget {
        SearchBudget {
            nodes: self.node_budget,
            time: Some(std::time::Duration::from_secs_f64(self.time_budget)),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// Print layer, head and width configuration with parameter counts.
    Describe {
        /// A checkpoint; without it the default configuration is described.
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCommand {
    /// Print the feature bundle of a state as JSON.
    Dump {
        instance: PathBuf,
        /// Random legal steps taken before dumping.
        #[arg(long, default_value_t = 0)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Print a complete training config with the default hyperparameters.
    Template {
        #[arg(long, default_value = "sd2")]
        generator: Generator,
        #[arg(long, default_value_t = 10)]
        jobs: usize,
        #[arg(long, default_value_t = 5)]
        machines: usize,
    },
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Generate {
            generator,
            jobs,
            machines,
            count,
            seed,
            out,
        } => {
            let m = generate_dataset(generator, jobs, machines, count, seed, &out)?;
            println!("wrote {} instances and {} to {}", m.instances.len(), MANIFEST, out.display());
        }
        Command::Solve {
            instances,
            run,
            policy,
            gantt_dir,
            trace_dir,
            report,
        } => {
            let r = cmd_solve(&instances, &policy, &run, gantt_dir.as_deref(), trace_dir.as_deref(), argv)?;
            print!("{}", r.table());
            for row in &r.rows {
                println!("{}\t{}\t{}\t{:.4}s", row.instance, row.policy, row.makespan, row.seconds);
            }
            if let Some(dir) = report {
                r.write(&dir)?;
            }
        }
        Command::Eval {
            dataset,
            run,
            policies,
            reference,
            budget,
            out,
        } => {
            let r = cmd_eval(&dataset, &policies, &run, reference.as_deref(), &budget.budget(), argv)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            r.write(&out)?;
            print!("{}", r.table());
        }
        Command::Train { config, out, resume } => cmd_train(&config, &out, resume)?,
        Command::Oracle {
            instances,
            budget,
            gantt_dir,
        } => {
            for path in &instances {
                let inst = load_instance(path)?;
                let r = solve_exact(&inst, budget.budget());
                println!(
                    "{}\tmakespan {}\t{}\t{} nodes",
                    instance_name(path),
                    r.makespan,
                    if r.proven { "proven" } else { "unproven" },
                    r.nodes
                );
                if let Some(dir) = &gantt_dir {
                    write_gantt(dir, path, &r.schedule)?;
                }
            }
        }
        Command::Model {
            command: ModelCommand::Describe { checkpoint },
        } => match checkpoint {
            Some(path) => {
                let (policy, sidecar) = load_policy(&path)?;
                print!("{}", policy.describe());
                println!("  metadata: {}", sidecar.metadata);
            }
            None => print!("{}", Policy::new(Default::default(), 0).describe()),
        },
        Command::Features {
            command: FeaturesCommand::Dump { instance, steps, seed },
        } => {
            if steps > 0 && seed.is_none() {
                bail!("--seed is required when taking random steps");
            }
            let inst = load_instance(&instance)?;
            let json = dump_features(&inst, steps, seed.unwrap_or(0))?;
            println!("{json}");
        }
        Command::Config {
            command: ConfigCommand::Template {
                generator,
                jobs,
                machines,
            },
        } => print!("{}", TrainConfig::standard(generator, jobs, machines).to_toml()),
    }
    Ok(())
}

fn write_gantt(dir: &Path, instance: &Path, schedule: &fjsp_core::ScheduleResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.csv", instance_name(instance)));
    std::fs::write(&path, schedule.to_gantt_csv()).with_context(|| format!("writing {}", path.display()))
}

fn check_seed(spec: &PolicySpec, run: &RunArgs) -> Result<()> {
    if spec.needs_seed(run.strategy) && run.seed.is_none() {
        bail!("--seed is required for a stochastic run");
    }
    if run.strategy == Strategy::Sample && run.samples == 0 {
        bail!("--samples must be positive for the sample strategy");
    }
    Ok(())
}

fn size_of(inst: &FjspInstance) -> String {
    format!("{}x{}", inst.num_jobs, inst.num_machines)
}

fn checkpoints_of(specs: &[PolicySpec]) -> Vec<(String, String)> {
    specs
        .iter()
        .filter_map(|s| match s {
            PolicySpec::Learned { path, sha256, .. } => Some((path.display().to_string(), sha256.clone())),
            _ => None,
        })
        .collect()
}

fn config_hash(specs: &[PolicySpec]) -> Option<String> {
    specs.iter().find_map(|s| match s {
        PolicySpec::Learned { path, .. } => load_sidecar(path)
            .ok()
            .map(|sc| sha256_bytes(sc.metadata["train_config"].to_string().as_bytes())),
        _ => None,
    })
}

pub fn cmd_solve(
    paths: &[PathBuf],
    policy: &str,
    run: &RunArgs,
    gantt_dir: Option<&Path>,
    trace_dir: Option<&Path>,
    argv: Vec<String>,
) -> Result<EvalReport> {
    let spec = PolicySpec::parse(policy)?;
    check_seed(&spec, run)?;
    let label = spec.label(run.strategy, run.samples);
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let inst = load_instance(path)?;
        hashes.push((instance_name(path), sha256_file(path)?));
        let out = solve(&spec, &inst, run.strategy, run.samples, run.seed, i as u64);
        fjsp_core::validate_schedule(&inst, &out.schedule)
            .map_err(|v| anyhow::anyhow!("internal error: invalid schedule for {}: {v:?}", path.display()))?;
        if let Some(dir) = gantt_dir {
            write_gantt(dir, path, &out.schedule)?;
        }
        if let Some(dir) = trace_dir {
            std::fs::create_dir_all(dir)?;
            let p = dir.join(format!("{}.trace.json", instance_name(path)));
            std::fs::write(p, serde_json::to_string_pretty(&out.trace)? + "\n")?;
        }
        rows.push(EvalRow {
            instance: instance_name(path),
            size: size_of(&inst),
            policy: label.clone(),
            makespan: out.schedule.makespan,
            seconds: out.seconds,
            reference: None,
            reference_kind: None,
            gap: None,
        });
    }
    let specs = [spec];
    let provenance = Provenance {
        command: argv,
        seed: run.seed,
        config_sha256: config_hash(&specs),
        checkpoints: checkpoints_of(&specs),
        instances: hashes,
        manifest: None,
    };
    Ok(EvalReport::new(rows, Vec::new(), provenance))
}

pub fn cmd_eval(
    dataset: &Path,
    policies: &[String],
    run: &RunArgs,
    reference: Option<&str>,
    budget: &SearchBudget,
    argv: Vec<String>,
) -> Result<EvalReport> {
    let specs = policies.iter().map(|p| PolicySpec::parse(p)).collect::<Result<Vec<_>>>()?;
    for s in &specs {
        check_seed(s, run)?;
    }
    let paths = list_dataset(dataset)?;
    if paths.is_empty() {
        bail!("no instances in {}", dataset.display());
    }
    let best_known = match reference {
        Some(r) if r != "oracle" => Some(load_best_known(Path::new(r))?),
        _ => None,
    };
    let mut warnings = Vec::new();
    if reference.is_none() {
        warnings.push("no reference given: objectives reported, gaps omitted".to_string());
    }

    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let inst = load_instance(path)?;
        let name = instance_name(path);
        hashes.push((name.clone(), sha256_file(path)?));
        let reference = match (reference, &best_known) {
            (Some("oracle"), _) => {
                let r = solve_exact(&inst, *budget);
                if !r.proven {
                    warnings.push(format!("{name}: oracle budget exhausted, reference is an upper bound"));
                }
                let kind = if r.proven { "oracle" } else { "oracle-unproven" };
                Some((r.makespan as f64, kind.to_string()))
            }
            (_, Some(table)) => match table.get(&name) {
                Some(&v) => Some((v, "best-known".to_string())),
                None => {
                    warnings.push(format!("{name}: no best-known value, gap omitted"));
                    None
                }
            },
            _ => None,
        };
        for spec in &specs {
            let out = solve(spec, &inst, run.strategy, run.samples, run.seed, i as u64);
            rows.push(
                EvalRow {
                    instance: name.clone(),
                    size: size_of(&inst),
                    policy: spec.label(run.strategy, run.samples),
                    makespan: out.schedule.makespan,
                    seconds: out.seconds,
                    reference: None,
                    reference_kind: None,
                    gap: None,
                }
                .with_reference(reference.clone()),
            );
        }
    }
    let manifest = std::fs::read_to_string(dataset.join(MANIFEST))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let provenance = Provenance {
        command: argv,
        seed: run.seed,
        config_sha256: config_hash(&specs),
        checkpoints: checkpoints_of(&specs),
        instances: hashes,
        manifest,
    };
    Ok(EvalReport::new(rows, warnings, provenance))
}

pub fn cmd_train(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = TrainConfig::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", config.display()))?;
    std::fs::create_dir_all(out)?;
    let canonical = serde_json::to_string(&cfg)?;
    let run_info = serde_json::json!({
        "config_sha256": sha256_bytes(canonical.as_bytes()),
        "config": cfg,
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&run_info)? + "\n")?;
    let outcome = train(&cfg, out, resume, &mut |row| {
        let val = row.val_makespan.map_or(String::new(), |v| format!("  val {v:.2}"));
        println!(
            "episode {:>5}  return {:>9.2}  policy {:>9.5}  value {:>8.5}  entropy {:>6.4}{val}  {:.1}s",
            row.episode, row.mean_return, row.policy_loss, row.value_loss, row.entropy, row.seconds
        );
    })?;
    match (outcome.best_val, outcome.best_episode) {
        (Some(v), Some(e)) => println!(
            "best validation makespan {v:.2} at episode {e}: {}",
            outcome.best_checkpoint.display()
        ),
        _ => println!("no validation ran"),
    }
    Ok(())
}

pub fn dump_features(inst: &FjspInstance, steps: usize, seed: u64) -> Result<String> {
    let mut state = ScheduleState::reset(inst)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        if state.is_done() {
            break;
        }
        let legal = state.legal_actions();
        let a = legal[rng.gen_range(0..legal.len())];
        state.step(a)?;
    }
    if state.is_done() {
        bail!("episode finished before the requested state; use fewer steps");
    }
    Ok(serde_json::to_string_pretty(&build_bundle(&state))?)
}
