//! Command-line verbs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use drivescale_core::closed_loop::{
    self, eta_sweep, run_scenarios, LogReplayPolicy, OutcomeRecord, Policy, SimConfig,
    SpeedFactorPolicy, StationaryPolicy,
};
use drivescale_core::fit::RunRecord;
use drivescale_core::synth::{self, WindowSpec, WorldConfig};
use drivescale_model::policy::ModelPolicy;
use drivescale_model::sweep::{inference_sweep, open_loop_by_count};
use drivescale_model::train::{evaluate, finetune_planner};
use drivescale_model::{checkpoint, JointModel};
use serde::Serialize;
use serde_json::json;

use crate::config::{content_hash, DataVariant, StudyConfig};
use crate::plan::{plan_sweep, train_config};
use crate::report::{build_report, fit_summary};
use crate::runner::{checkpoint_path, run_sweep, scenarios, sweep_config, Datasets};
use crate::store::{Store, StoreRow};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "drivescale",
    about = "Scaling studies of joint motion forecasting and planning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Study config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set plan.seeds=[0,1]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Result store (JSONL); falls back to $DRIVESCALE_STORE.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<StudyConfig, CliError> {
        StudyConfig::load(self.config.as_deref(), &self.overrides)
    }

    fn store(&self) -> Result<Store, CliError> {
        Store::resolve(self.store.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
    Scenarios,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Route-conditioned planners fine-tuned from stored runs.
    Model,
    Replay,
    Stationary,
    Speed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the sweep plan as JSON.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every planned job not yet in the store.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Stop after this many new jobs.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score a checkpoint on the eval set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Job key of a stored run.
        #[arg(
            long,
            conflicts_with = "checkpoint",
            required_unless_present = "checkpoint"
        )]
        job: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Count closed-loop failures after calibrating the progress bias.
    Closedloop {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyKind,
        /// Stored runs to fine-tune as planners; all full-data runs if empty.
        #[arg(long)]
        job: Vec<String>,
        /// Per-scenario outcomes (JSONL).
        #[arg(long)]
        outcomes: Option<PathBuf>,
    },
    /// Open-loop metrics against sample count for stored runs.
    InferenceSweep {
        #[command(flatten)]
        common: Common,
        /// Stored runs to sweep; all full-data runs if empty.
        #[arg(long)]
        job: Vec<String>,
    },
    /// Fit the iso-FLOP scaling laws and print them as JSON.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Write the report bundle (CSV plot data and summary.json).
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: Serialize>(out: &mut dyn Write, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Store(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    closed_loop::write_jsonl(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

/// Stored full-data runs, optionally restricted to `keys` (in that order).
fn stored_runs(rows: &[StoreRow], keys: &[String]) -> Result<Vec<(String, RunRecord)>, CliError> {
    let runs: BTreeMap<&str, &RunRecord> = rows
        .iter()
        .filter_map(|r| match r {
            StoreRow::Run {
                job,
                record,
                variant,
                ..
            } if keys.contains(job) || *variant == DataVariant::Full => {
                Some((job.as_str(), record))
            }
            _ => None,
        })
        .collect();
    if keys.is_empty() {
        let mut all: Vec<(String, RunRecord)> = runs
            .iter()
            .map(|(k, r)| (k.to_string(), (*r).clone()))
            .collect();
        all.sort_by(|a, b| a.1.flops.cmp(&b.1.flops).then(a.0.cmp(&b.0)));
        return Ok(all);
    }
    keys.iter()
        .map(|k| {
            runs.get(k.as_str())
                .map(|r| (k.clone(), (*r).clone()))
                .ok_or_else(|| CliError::Config(format!("no stored run `{k}`")))
        })
        .collect()
}

fn load_checkpoint(store: &Store, job: &str) -> Result<JointModel, CliError> {
    let path = checkpoint_path(&store.checkpoint_dir(), job);
    checkpoint::load(&path)
        .map(|(m, _)| m)
        .map_err(|e| CliError::Store(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            split,
            out: path,
        } => {
            let cfg = common.config()?;
            let n = match split {
                Split::Train | Split::Eval => {
                    let world = if split == Split::Train {
                        cfg.data.train_world()
                    } else {
                        cfg.data.eval_world()
                    };
                    let data = synth::build_dataset(&world, &cfg.vocab, &cfg.data.windows())?;
                    write_jsonl(&path, &data)?;
                    data.len()
                }
                Split::Scenarios => {
                    let c = &cfg.closedloop;
                    let scns = scenarios(&cfg, c.eval_seed, c.eval_scenarios);
                    write_jsonl(&path, &scns)?;
                    scns.len()
                }
            };
            writeln!(out, "wrote {n} rows to {}", path.display())?;
        }
        Command::Plan { common } => {
            let cfg = common.config()?;
            let data = Datasets::build(&cfg, &cfg.plan.variants)?;
            let plan = plan_sweep(&cfg, &data.sizes())?;
            let jobs: Vec<_> = plan
                .jobs
                .iter()
                .map(|j| Ok(json!({ "key": j.key(&cfg), "flops": j.flops(&cfg)?, "job": j })))
                .collect::<Result<_, CliError>>()?;
            print_json(
                out,
                &json!({
                    "mode": plan.mode,
                    "config_hash": plan.config_hash,
                    "dataset_examples": data.sizes(),
                    "jobs": jobs,
                    "rejected": plan.rejected,
                }),
            )?;
        }
        Command::Sweep { common, limit } => {
            let cfg = common.config()?;
            let store = common.store()?;
            let data = Datasets::build(&cfg, &cfg.plan.variants)?;
            let plan = plan_sweep(&cfg, &data.sizes())?;
            let o = run_sweep(&plan, &cfg, &data, &store, limit)?;
            writeln!(
                out,
                "trained {} skipped {} failed {}",
                o.trained, o.skipped, o.failed
            )?;
            if o.failed > 0 {
                return Err(CliError::Job(format!(
                    "{} of {} jobs failed",
                    o.failed,
                    plan.jobs.len()
                )));
            }
        }
        Command::Eval {
            common,
            job,
            checkpoint,
        } => {
            let cfg = common.config()?;
            let model = match (job, checkpoint) {
                (Some(job), _) => load_checkpoint(&common.store()?, &job)?,
                (None, Some(path)) => checkpoint::load(&path)?.0,
                (None, None) => return Err(CliError::Config("give --job or --checkpoint".into())),
            };
            let eval =
                synth::build_dataset(&cfg.data.eval_world(), &cfg.vocab, &cfg.data.windows())?;
            let loss = evaluate(&model, &eval)?;
            let m = &cfg.metrics;
            let metrics = if m.scenes > 0 && m.rollouts > 0 {
                let sc = sweep_config(
                    &cfg,
                    vec![m.rollouts],
                    m.k.min(m.rollouts),
                    m.temperature,
                    cfg.seed,
                );
                Some(open_loop_by_count(&model, &eval[..m.scenes.min(eval.len())], &sc)?[0])
            } else {
                None
            };
            print_json(
                out,
                &json!({ "eval_loss": loss.loss, "per_type_losses": loss.per_type(), "open_loop": metrics }),
            )?;
        }
        Command::InferenceSweep { common, job } => {
            let cfg = common.config()?;
            let store = common.store()?;
            let rows = store.load()?;
            let done = store.completed()?;
            let inf = &cfg.inference;
            let eval =
                synth::build_dataset(&cfg.data.eval_world(), &cfg.vocab, &cfg.data.windows())?;
            let scenes = &eval[..inf.scenes.min(eval.len())];
            let sc = sweep_config(
                &cfg,
                inf.sample_counts.clone(),
                inf.k,
                inf.temperature,
                cfg.seed,
            );
            let mut added = 0;
            for (run, record) in stored_runs(&rows, &job)? {
                let key = content_hash(&("inference", &run, &sc, &cfg.data, inf.scenes))[..16]
                    .to_string();
                if done.contains(&key) {
                    continue;
                }
                let model = load_checkpoint(&store, &run)?;
                let sweep = inference_sweep(&model, scenes, &sc)?;
                store.append(&StoreRow::Inference {
                    job: key,
                    model: run,
                    params: record.params,
                    rows: sweep,
                })?;
                added += 1;
            }
            writeln!(out, "swept {added} models")?;
        }
        Command::Closedloop {
            common,
            policy,
            job,
            outcomes,
        } => closedloop(&common, policy, &job, outcomes.as_deref(), out)?,
        Command::Fit { common } => {
            let cfg = common.config()?;
            let rows = common.store()?.load()?;
            print_json(out, &fit_summary(&rows, &cfg)?)?;
        }
        Command::Report { common, out: dir } => {
            let cfg = common.config()?;
            let store = common.store()?;
            let bytes = match std::fs::read(store.path()) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let report = build_report(&store.load()?, &bytes, &cfg)?;
            report.write_to(&dir)?;
            for (name, s) in &report.sections {
                match &s.reason {
                    None => writeln!(out, "{name}: ok")?,
                    Some(r) => writeln!(out, "{name}: unavailable ({r})")?,
                }
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ModelOutcome<'a> {
    model: &'a str,
    alpha: f64,
    #[serde(flatten)]
    outcome: OutcomeRecord,
}

fn closedloop(
    common: &Common,
    kind: PolicyKind,
    jobs: &[String],
    outcomes: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = common.config()?;
    let store = common.store()?;
    let c = &cfg.closedloop;
    let calibration = scenarios(&cfg, c.calibration_seed, c.calibration_scenarios);
    let eval = scenarios(&cfg, c.eval_seed, c.eval_scenarios);
    let done = store.completed()?;
    let row_key = |model: &str| {
        content_hash(&("closedloop", model, kind, c, &cfg.data, &cfg.vocab))[..16].to_string()
    };

    let mut planners: Vec<(String, f64, JointModel)> = Vec::new();
    let scripted: Box<dyn Policy> = match kind {
        PolicyKind::Model => {
            let rows = store.load()?;
            let pending: Vec<(String, RunRecord)> = stored_runs(&rows, jobs)?
                .into_iter()
                .filter(|(k, _)| !done.contains(&row_key(k)))
                .collect();
            if !pending.is_empty() {
                let one = WorldConfig {
                    modeled_agents: 1,
                    ..cfg.data.train_world()
                };
                let spec = WindowSpec {
                    include_route: true,
                    ..WindowSpec::from_config(&one)
                };
                let train_set = synth::build_dataset(&one, &cfg.vocab, &spec)?;
                let held = WorldConfig {
                    modeled_agents: 1,
                    ..cfg.data.eval_world()
                };
                let held_set = synth::build_dataset(&held, &cfg.vocab, &spec)?;
                for (key, record) in pending {
                    let mut model = load_checkpoint(&store, &key)?;
                    let budget = (c.planner_fraction * record.flops as f64) as u64;
                    let tc = train_config(&cfg, 10, record.seed);
                    let ft =
                        finetune_planner(&mut model, &train_set, &held_set, budget, &tc, &key)?;
                    planners.push((key, (record.flops + ft.record.flops) as f64, model));
                }
            }
            Box::new(StationaryPolicy { horizon: 0 })
        }
        PolicyKind::Replay => Box::new(LogReplayPolicy { horizon: c.horizon }),
        PolicyKind::Stationary => Box::new(StationaryPolicy { horizon: c.horizon }),
        PolicyKind::Speed => Box::new(SpeedFactorPolicy {
            horizon: c.horizon,
            center: c.speed_center,
            spread: c.speed_spread,
        }),
    };
    let model_policies: Vec<ModelPolicy<'_>> = planners
        .iter()
        .map(|(_, _, m)| ModelPolicy {
            model: m,
            temperature: c.temperature,
        })
        .collect();
    let name = serde_json::to_value(kind)
        .unwrap()
        .as_str()
        .unwrap()
        .to_string();
    let models: Vec<(String, f64, &dyn Policy)> = match kind {
        PolicyKind::Model => planners
            .iter()
            .zip(&model_policies)
            .map(|((k, f, _), p)| (k.clone(), *f, p as &dyn Policy))
            .collect(),
        _ if done.contains(&row_key(&name)) => Vec::new(),
        _ => vec![(name, 0.0, scripted.as_ref())],
    };
    let rows = eta_sweep(&models, &calibration, &eval, &c.sim, &c.calibration)?;
    let mut records = Vec::new();
    for ((model, _, policy), row) in models.iter().zip(&rows) {
        store.append(&StoreRow::ClosedLoop {
            job: row_key(model),
            row: row.clone(),
        })?;
        writeln!(
            out,
            "{model}: eta {} of {} (alpha {:.4})",
            row.eta, row.scenarios, row.alpha
        )?;
        if outcomes.is_some() {
            let sim = SimConfig {
                alpha: row.alpha,
                ..c.sim
            };
            for r in run_scenarios(*policy, &eval, &sim)? {
                records.push(ModelOutcome {
                    model,
                    alpha: row.alpha,
                    outcome: OutcomeRecord::from(&r),
                });
            }
        }
    }
    if let Some(path) = outcomes {
        write_jsonl(path, &records)?;
    }
    if models.is_empty() {
        writeln!(out, "nothing to evaluate")?;
    }
    Ok(())
}
