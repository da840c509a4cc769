//! Job execution: datasets, training runs and the resumable sweep loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drivescale_core::closed_loop::Scenario;
use drivescale_core::fit::RunRecord;
use drivescale_core::synth::{self, AgentType, Example};
use drivescale_model::sweep::{open_loop_by_count, SweepConfig};
use drivescale_model::train::train;
use drivescale_model::{checkpoint, JointModel};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{DataVariant, StudyConfig};
use crate::plan::{Job, SweepPlan};
use crate::store::{Store, StoreRow};
use crate::CliError;

/// Training examples per data variant (in a fixed shuffled order) and the
/// held-out eval set.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: BTreeMap<DataVariant, Vec<Example>>,
    pub eval: Vec<Example>,
}

impl Datasets {
    pub fn build(cfg: &StudyConfig, variants: &[DataVariant]) -> Result<Self, CliError> {
        let windows = cfg.data.windows();
        let mut full = synth::build_dataset(&cfg.data.train_world(), &cfg.vocab, &windows)?;
        full.shuffle(&mut synth::stream_rng(cfg.data.seed, 0xda7a));
        let mut train = BTreeMap::new();
        for &v in variants {
            let set = match v {
                DataVariant::Full => full.clone(),
                DataVariant::WithoutAv => {
                    let m = cfg.data.train_world().modeled_agents;
                    synth::exclude_agent(full.clone(), AgentType::Av, m).examples
                }
            };
            train.insert(v, set);
        }
        let eval = synth::build_dataset(&cfg.data.eval_world(), &cfg.vocab, &windows)?;
        Ok(Self { train, eval })
    }

    pub fn sizes(&self) -> BTreeMap<DataVariant, usize> {
        self.train.iter().map(|(k, v)| (*k, v.len())).collect()
    }
}

pub fn sweep_config(
    cfg: &StudyConfig,
    sample_counts: Vec<usize>,
    k: usize,
    temperature: f64,
    seed: u64,
) -> SweepConfig {
    SweepConfig {
        sample_counts,
        k,
        temperature,
        seed,
        thresholds: cfg.thresholds,
        rules: cfg.buckets,
    }
}

/// Trains one job and scores it on the eval set.
pub fn run_job(
    job: &Job,
    cfg: &StudyConfig,
    data: &Datasets,
) -> Result<(RunRecord, JointModel), CliError> {
    let train_set = data
        .train
        .get(&job.variant)
        .ok_or_else(|| CliError::Job(format!("no {:?} dataset", job.variant)))?;
    if job.dataset_examples > train_set.len() {
        return Err(CliError::Job(format!(
            "job wants {} examples, dataset has {}",
            job.dataset_examples,
            train_set.len()
        )));
    }
    let mut model = JointModel::new(job.model_config(cfg), job.seed)?;
    let out = train(
        &mut model,
        &train_set[..job.dataset_examples],
        &data.eval,
        &job.train,
        &job.key(cfg),
    )?;
    let mut record = out.record;
    let m = &cfg.metrics;
    if m.scenes > 0 && m.rollouts > 0 {
        let scenes = &data.eval[..m.scenes.min(data.eval.len())];
        let sc = sweep_config(
            cfg,
            vec![m.rollouts],
            m.k.min(m.rollouts),
            m.temperature,
            job.seed,
        );
        let metrics = open_loop_by_count(&model, scenes, &sc)?;
        record.min_ade = Some(metrics[0].min_ade);
        record.w_ade = Some(metrics[0].w_ade);
    }
    record.validate().map_err(CliError::Job)?;
    Ok((record, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SweepOutcome {
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
}

pub fn checkpoint_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.dsck"))
}

/// Runs every job of `plan` not yet in the store, at most `limit` of them,
/// appending results in plan order. Failed jobs are recorded and the sweep
/// continues.
pub fn run_sweep(
    plan: &SweepPlan,
    cfg: &StudyConfig,
    data: &Datasets,
    store: &Store,
    limit: Option<usize>,
) -> Result<SweepOutcome, CliError> {
    let mut done = store.completed()?;
    let mut outcome = SweepOutcome::default();
    let mut pending = Vec::new();
    for job in &plan.jobs {
        let key = job.key(cfg);
        if done.contains(&key) {
            outcome.skipped += 1;
        } else {
            done.insert(key.clone());
            pending.push((key, job));
        }
    }
    if let Some(l) = limit {
        pending.truncate(l);
    }
    let ckpt_dir = store.checkpoint_dir();
    for chunk in pending.chunks(cfg.max_parallel) {
        let results: Vec<Result<(RunRecord, JointModel), CliError>> = chunk
            .par_iter()
            .map(|(_, job)| run_job(job, cfg, data))
            .collect();
        for ((key, job), res) in chunk.iter().zip(results) {
            let row = match res {
                Ok((record, model)) => {
                    std::fs::create_dir_all(&ckpt_dir)?;
                    checkpoint::save(
                        &checkpoint_path(&ckpt_dir, key),
                        &model,
                        job.train.total_steps as u64,
                        job.seed,
                    )?;
                    outcome.trained += 1;
                    StoreRow::Run {
                        job: key.clone(),
                        budget: job.budget,
                        variant: job.variant,
                        record,
                    }
                }
                Err(e) => {
                    outcome.failed += 1;
                    StoreRow::Failed {
                        job: key.clone(),
                        diagnostic: e.to_string(),
                    }
                }
            };
            store.append(&row)?;
        }
    }
    Ok(outcome)
}

/// Closed-loop scenarios generated from `seed` with the study's world.
pub fn scenarios(cfg: &StudyConfig, seed: u64, count: usize) -> Vec<Scenario> {
    let world = cfg.data.world(seed, count);
    (0..count as u64)
        .map(|id| Scenario::generate(&world, id, cfg.closedloop.sim_seconds))
        .collect()
}
