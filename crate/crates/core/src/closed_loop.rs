//! Log-playback closed-loop simulation of a planning policy.
//!
//! Every 0.1 s the policy proposes rollouts for the AV, one is selected by a
//! typicality-versus-progress rule, and the AV advances along the first
//! 0.1 s of it. Other agents replay their logs. A scenario fails when the
//! AV ends up with significantly more or less route progress than the log,
//! or collides with a logged agent.

use crate::codec::Point;
use crate::eval::ade;
use crate::geometry::{catmull_rom, dist, Obb, Polyline};
use crate::synth::{
    self, stream_rng, LoggedAgent, RoadSegment, Segment, TrafficLight, WorldConfig,
};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClosedLoopError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("no rollouts")]
    NoRollouts,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const LOOKAHEAD_SECONDS: f64 = 15.0;

/// A closed-loop test case. `agents[0]` is the logged (manually driven) AV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub dt: f64,
    /// Log index of simulation time zero; earlier samples are history.
    pub start: usize,
    /// Simulation steps.
    pub steps: usize,
    pub agents: Vec<LoggedAgent>,
    pub roadgraph: Vec<RoadSegment>,
    pub traffic_lights: Vec<TrafficLight>,
    /// AV route from its position at simulation start.
    pub route: Vec<Point>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ClosedLoopError> {
        let need = self.start + self.steps + 1;
        let av = self
            .agents
            .first()
            .ok_or_else(|| ClosedLoopError::InvalidScenario("no AV".into()))?;
        if av.positions.len() < need || av.valid[..need].iter().any(|v| !v) {
            return Err(ClosedLoopError::InvalidScenario(
                "AV log does not cover the run".into(),
            ));
        }
        if self.route.len() < 2 || Polyline::new(self.route.clone()).length() <= 0.0 {
            return Err(ClosedLoopError::InvalidScenario(
                "route has no length".into(),
            ));
        }
        Ok(())
    }

    pub fn from_segment(seg: Segment, history_seconds: f64, sim_seconds: f64) -> Self {
        let start = (history_seconds / seg.dt).round() as usize;
        let steps = (sim_seconds / seg.dt).round() as usize;
        let av = &seg.agents[0];
        let route = route_from(&av.positions[start..], &av.headings[start..]);
        Scenario {
            id: seg.id,
            dt: seg.dt,
            start,
            steps,
            agents: seg.agents,
            roadgraph: seg.roadgraph,
            traffic_lights: seg.traffic_lights,
            route,
        }
    }

    /// Scenario `id` of a world. The logs cover the history, the run and
    /// [`LOOKAHEAD_SECONDS`] more, so log-following plans never run out.
    pub fn generate(config: &WorldConfig, id: u64, sim_seconds: f64) -> Self {
        let seconds = config.history_seconds + sim_seconds + LOOKAHEAD_SECONDS;
        let seg = synth::generate_segment_with_duration(config, id, seconds);
        Self::from_segment(seg, config.history_seconds, sim_seconds)
    }

    pub fn av_log(&self) -> &LoggedAgent {
        &self.agents[0]
    }

    pub fn end_index(&self) -> usize {
        self.start + self.steps
    }

    /// Route progress of the logged AV over the run.
    pub fn log_progress(&self) -> f64 {
        let pl = Polyline::new(self.route.clone());
        pl.project(self.av_log().positions[self.end_index()])
            - pl.project(self.av_log().positions[self.start])
    }
}

fn route_from(positions: &[Point], headings: &[f64]) -> Vec<Point> {
    let pl = Polyline::new(positions.to_vec());
    let mut out = Vec::new();
    let mut s = 0.0;
    while s < pl.length() {
        out.push(pl.point_at(s));
        s += 2.0;
    }
    let last = *positions.last().unwrap();
    let h = *headings.last().unwrap();
    for i in 0..=30 {
        let e = 2.0 * i as f64;
        out.push([last[0] + e * h.cos(), last[1] + e * h.sin()]);
    }
    out.dedup_by(|a, b| dist(*a, *b) < 1e-9);
    out
}

/// Arc length along `route` of the route point nearest to the last point of
/// `track`.
pub fn progress(track: &[Point], route: &[Point]) -> Result<f64, ClosedLoopError> {
    let end = *track.last().ok_or(ClosedLoopError::EmptyTrajectory)?;
    if route.is_empty() {
        return Err(ClosedLoopError::InvalidScenario("empty route".into()));
    }
    Ok(Polyline::new(route.to_vec()).project(end))
}

/// Index of the rollout minimizing mean pairwise ADE minus `alpha` times its
/// progress advantage over the mean. Ties go to the lowest index.
pub fn select_plan(
    rollouts: &[Vec<Point>],
    route: &[Point],
    alpha: f64,
) -> Result<usize, ClosedLoopError> {
    Ok(plan_scores(rollouts, route, alpha)?
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, &s)| if s < best.1 { (i, s) } else { best },
        )
        .0)
}

pub fn plan_scores(
    rollouts: &[Vec<Point>],
    route: &[Point],
    alpha: f64,
) -> Result<Vec<f64>, ClosedLoopError> {
    let r = rollouts.len();
    if r == 0 {
        return Err(ClosedLoopError::NoRollouts);
    }
    let pl = Polyline::new(route.to_vec());
    let mut prog = Vec::with_capacity(r);
    for y in rollouts {
        prog.push(pl.project(*y.last().ok_or(ClosedLoopError::EmptyTrajectory)?));
    }
    let mean_prog = prog.iter().sum::<f64>() / r as f64;
    let mut pair = vec![0.0; r];
    for i in 0..r {
        for j in i + 1..r {
            let d = ade(&rollouts[i], &rollouts[j]);
            pair[i] += d;
            pair[j] += d;
        }
    }
    Ok((0..r)
        .map(|i| pair[i] / r as f64 - alpha * (prog[i] - mean_prog))
        .collect())
}

/// What a policy sees at each simulation step.
pub struct SimState<'a> {
    pub scenario: &'a Scenario,
    /// Log index of the current time.
    pub index: usize,
    /// AV history: logged before the run, executed afterwards. Valid up to
    /// and including `index`.
    pub av: &'a LoggedAgent,
}

impl SimState<'_> {
    pub fn av_position(&self) -> Point {
        self.av.positions[self.index]
    }
}

/// A planner producing AV rollouts in world coordinates, one point per
/// `plan_dt` seconds starting `plan_dt` after the current time.
pub trait Policy: Sync {
    fn rollouts(&self, state: &SimState<'_>, count: usize, rng: &mut ChaCha8Rng)
        -> Vec<Vec<Point>>;

    fn plan_dt(&self) -> f64 {
        0.5
    }
}

fn log_point(av: &LoggedAgent, t: f64) -> Point {
    let last = av.positions.len() - 1;
    let k = t.floor().max(0.0) as usize;
    if k >= last {
        return av.positions[last];
    }
    let u = t - k as f64;
    let (a, b) = (av.positions[k], av.positions[k + 1]);
    [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
}

/// Replays the logged AV path.
pub struct LogReplayPolicy {
    pub horizon: usize,
}

impl Policy for LogReplayPolicy {
    fn rollouts(&self, s: &SimState<'_>, count: usize, _: &mut ChaCha8Rng) -> Vec<Vec<Point>> {
        let av = s.scenario.av_log();
        let per = self.plan_dt() / s.scenario.dt;
        let plan: Vec<Point> = (1..=self.horizon)
            .map(|j| log_point(av, s.index as f64 + j as f64 * per))
            .collect();
        vec![plan; count]
    }
}

/// Never moves.
pub struct StationaryPolicy {
    pub horizon: usize,
}

impl Policy for StationaryPolicy {
    fn rollouts(&self, s: &SimState<'_>, count: usize, _: &mut ChaCha8Rng) -> Vec<Vec<Point>> {
        vec![vec![s.av_position(); self.horizon]; count]
    }
}

/// Follows the logged path from the AV's nearest logged point with a
/// spread of speed factors, centered per scenario. Its assertiveness grows
/// monotonically with the progress bias.
pub struct SpeedFactorPolicy {
    pub horizon: usize,
    /// Per-scenario center factor is uniform in this range.
    pub center: (f64, f64),
    pub spread: f64,
}

impl Policy for SpeedFactorPolicy {
    fn rollouts(&self, s: &SimState<'_>, count: usize, _: &mut ChaCha8Rng) -> Vec<Vec<Point>> {
        let av = s.scenario.av_log();
        let here = s.av_position();
        // matched log time near the current index
        let lo = s.scenario.start;
        let hi = av.positions.len() - 1;
        let k = (lo..=hi)
            .min_by(|&a, &b| {
                dist(av.positions[a], here)
                    .partial_cmp(&dist(av.positions[b], here))
                    .unwrap()
            })
            .unwrap();
        let base = av.positions[k];
        let mut rng = stream_rng(0x5eed, s.scenario.id);
        let center =
            self.center.0 + (self.center.1 - self.center.0) * rand::Rng::random::<f64>(&mut rng);
        let per = self.plan_dt() / s.scenario.dt;
        (0..count)
            .map(|i| {
                let frac = if count > 1 {
                    i as f64 / (count - 1) as f64 - 0.5
                } else {
                    0.0
                };
                let f = (center + self.spread * frac).max(0.0);
                (1..=self.horizon)
                    .map(|j| {
                        let p = log_point(av, k as f64 + f * j as f64 * per);
                        [here[0] + p[0] - base[0], here[1] + p[1] - base[1]]
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    OverProgress,
    UnderProgress,
    Collision,
    /// The planner produced non-finite positions.
    Aborted,
}

impl Outcome {
    pub fn is_failure(self) -> bool {
        self != Outcome::Ok
    }
}

/// Significant progress difference: `max(min_meters, fraction * log)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressThreshold {
    pub min_meters: f64,
    pub fraction: f64,
}

impl Default for ProgressThreshold {
    fn default() -> Self {
        Self {
            min_meters: 5.0,
            fraction: 0.15,
        }
    }
}

impl ProgressThreshold {
    pub fn classify(&self, policy: f64, log: f64) -> Outcome {
        let thr = self.min_meters.max(self.fraction * log.abs());
        if policy - log > thr {
            Outcome::OverProgress
        } else if log - policy > thr {
            Outcome::UnderProgress
        } else {
            Outcome::Ok
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rollouts: usize,
    pub alpha: f64,
    pub seed: u64,
    pub threshold: ProgressThreshold,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rollouts: 16,
            alpha: 0.0,
            seed: 0,
            threshold: ProgressThreshold::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario_id: u64,
    pub outcome: Outcome,
    pub progress: f64,
    pub log_progress: f64,
    /// Simulation step of the first overlap with a logged agent.
    pub first_collision: Option<usize>,
    pub executed: Vec<Point>,
    pub executed_headings: Vec<f64>,
    pub diagnostic: Option<String>,
}

fn first_overlap(scn: &Scenario, av: &LoggedAgent, k: usize) -> bool {
    let me = av.obb(k);
    scn.agents.iter().skip(1).any(|a| {
        a.valid.get(k).copied().unwrap_or(false)
            && Obb {
                center: a.positions[k],
                heading: a.headings[k],
                length: a.length,
                width: a.width,
            }
            .overlaps(&me)
    })
}

/// Runs one scenario with the policy in the loop.
pub fn simulate<P: Policy + ?Sized>(
    policy: &P,
    scn: &Scenario,
    cfg: &SimConfig,
) -> Result<SimResult, ClosedLoopError> {
    scn.validate()?;
    let mut rng = stream_rng(cfg.seed, scn.id);
    let log = scn.av_log();
    let mut av = LoggedAgent {
        positions: log.positions[..=scn.start].to_vec(),
        headings: log.headings[..=scn.start].to_vec(),
        speeds: log.speeds[..=scn.start].to_vec(),
        valid: vec![true; scn.start + 1],
        ..log.clone()
    };
    let plan_steps = (policy.plan_dt() / scn.dt).round() as usize;
    let u = 1.0 / plan_steps as f64;
    let mut first_collision = None;
    let mut diagnostic = None;
    for step in 0..scn.steps {
        let index = scn.start + step;
        let rollouts = {
            let state = SimState {
                scenario: scn,
                index,
                av: &av,
            };
            policy.rollouts(&state, cfg.rollouts.max(1), &mut rng)
        };
        if rollouts.is_empty()
            || rollouts
                .iter()
                .any(|r| r.is_empty() || r.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())))
        {
            diagnostic = Some(format!("non-finite or empty plan at step {step}"));
            break;
        }
        let chosen = &rollouts[select_plan(&rollouts, &scn.route, cfg.alpha)?];
        let p1 = av.positions[index];
        let p0 = av.positions[index.saturating_sub(plan_steps)];
        let p2 = chosen[0];
        let p3 = chosen
            .get(1)
            .copied()
            .unwrap_or([2.0 * p2[0] - p1[0], 2.0 * p2[1] - p1[1]]);
        let next = catmull_rom(p0, p1, p2, p3, u);
        let moved = dist(next, p1);
        let heading = if moved > 1e-3 {
            (next[1] - p1[1]).atan2(next[0] - p1[0])
        } else {
            av.headings[index]
        };
        av.positions.push(next);
        av.headings.push(heading);
        av.speeds.push(moved / scn.dt);
        av.valid.push(true);
        if first_collision.is_none() && first_overlap(scn, &av, index + 1) {
            first_collision = Some(step + 1);
        }
    }
    let executed: Vec<Point> = av.positions[scn.start..].to_vec();
    let executed_headings = av.headings[scn.start..].to_vec();
    let pl = Polyline::new(scn.route.clone());
    let origin = pl.project(log.positions[scn.start]);
    let progress = pl.project(*executed.last().unwrap()) - origin;
    let log_progress = scn.log_progress();
    let outcome = if diagnostic.is_some() {
        Outcome::Aborted
    } else {
        match cfg.threshold.classify(progress, log_progress) {
            Outcome::Ok if first_collision.is_some() => Outcome::Collision,
            o => o,
        }
    };
    Ok(SimResult {
        scenario_id: scn.id,
        outcome,
        progress,
        log_progress,
        first_collision,
        executed,
        executed_headings,
        diagnostic,
    })
}

/// Aggregate closed-loop outcome counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub outcomes: Vec<(u64, Outcome)>,
    /// Failed scenarios.
    pub eta: usize,
    pub over: usize,
    pub under: usize,
    pub collisions: usize,
    pub aborted: usize,
}

impl FailureReport {
    pub fn from_results(results: &[SimResult]) -> Self {
        let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count();
        Self {
            outcomes: results.iter().map(|r| (r.scenario_id, r.outcome)).collect(),
            eta: results.iter().filter(|r| r.outcome.is_failure()).count(),
            over: count(Outcome::OverProgress),
            under: count(Outcome::UnderProgress),
            collisions: count(Outcome::Collision),
            aborted: count(Outcome::Aborted),
        }
    }

    /// Over-progress count divided by under-progress count; `None` when
    /// there are no under-progress scenarios.
    pub fn assertiveness(&self) -> Option<f64> {
        (self.under > 0).then(|| self.over as f64 / self.under as f64)
    }
}

pub fn run_scenarios<P: Policy + ?Sized>(
    policy: &P,
    scenarios: &[Scenario],
    cfg: &SimConfig,
) -> Result<Vec<SimResult>, ClosedLoopError> {
    scenarios
        .par_iter()
        .map(|s| simulate(policy, s, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub initial_alpha: f64,
    pub alpha_max: f64,
    pub band: (f64, f64),
    pub max_iterations: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            initial_alpha: 0.0,
            alpha_max: 4.0,
            band: (0.8, 1.25),
            max_iterations: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: f64,
    pub ratio: Option<f64>,
    pub calibrated: bool,
    pub evaluations: usize,
}

/// Bisects the progress bias so that the assertiveness ratio lands inside
/// `spec.band`. Assumes the ratio grows with alpha. An undefined ratio (no
/// under-progress) counts as too assertive.
pub fn calibrate_alpha<P: Policy + ?Sized>(
    policy: &P,
    scenarios: &[Scenario],
    base: &SimConfig,
    spec: &CalibrationSpec,
) -> Result<Calibration, ClosedLoopError> {
    let mut evaluations = 0;
    let mut ratio_at = |alpha: f64| -> Result<Option<f64>, ClosedLoopError> {
        evaluations += 1;
        let cfg = SimConfig { alpha, ..*base };
        Ok(FailureReport::from_results(&run_scenarios(policy, scenarios, &cfg)?).assertiveness())
    };
    let (lo_band, hi_band) = spec.band;
    let inside = |r: Option<f64>| r.is_some_and(|r| r >= lo_band && r <= hi_band);
    let too_timid = |r: Option<f64>| r.is_some_and(|r| r < lo_band);
    let r0 = ratio_at(spec.initial_alpha)?;
    if inside(r0) {
        return Ok(Calibration {
            alpha: spec.initial_alpha,
            ratio: r0,
            calibrated: true,
            evaluations,
        });
    }
    let (mut lo, mut hi) = (0.0, spec.alpha_max);
    let r_lo = ratio_at(lo)?;
    if inside(r_lo) {
        return Ok(Calibration {
            alpha: lo,
            ratio: r_lo,
            calibrated: true,
            evaluations,
        });
    }
    if !too_timid(r_lo) {
        return Ok(Calibration {
            alpha: lo,
            ratio: r_lo,
            calibrated: false,
            evaluations,
        });
    }
    let r_hi = ratio_at(hi)?;
    if inside(r_hi) {
        return Ok(Calibration {
            alpha: hi,
            ratio: r_hi,
            calibrated: true,
            evaluations,
        });
    }
    if too_timid(r_hi) {
        return Ok(Calibration {
            alpha: hi,
            ratio: r_hi,
            calibrated: false,
            evaluations,
        });
    }
    let mut last = (hi, r_hi);
    for _ in 0..spec.max_iterations {
        let mid = 0.5 * (lo + hi);
        let r = ratio_at(mid)?;
        if inside(r) {
            return Ok(Calibration {
                alpha: mid,
                ratio: r,
                calibrated: true,
                evaluations,
            });
        }
        if too_timid(r) {
            lo = mid;
        } else {
            hi = mid;
        }
        last = (mid, r);
    }
    Ok(Calibration {
        alpha: last.0,
        ratio: last.1,
        calibrated: false,
        evaluations,
    })
}

/// One row of a failure-count-versus-compute table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub model: String,
    pub flops: f64,
    pub alpha: f64,
    pub calibrated: bool,
    pub eta: usize,
    pub ratio: Option<f64>,
    pub scenarios: usize,
}

/// Calibrates each policy on `calibration` and counts failures on `eval`.
pub fn eta_sweep(
    models: &[(String, f64, &dyn Policy)],
    calibration: &[Scenario],
    eval: &[Scenario],
    base: &SimConfig,
    spec: &CalibrationSpec,
) -> Result<Vec<EtaRow>, ClosedLoopError> {
    let mut rows = Vec::with_capacity(models.len());
    for (name, flops, policy) in models {
        let cal = calibrate_alpha(*policy, calibration, base, spec)?;
        let cfg = SimConfig {
            alpha: cal.alpha,
            ..*base
        };
        let report = FailureReport::from_results(&run_scenarios(*policy, eval, &cfg)?);
        rows.push(EtaRow {
            model: name.clone(),
            flops: *flops,
            alpha: cal.alpha,
            calibrated: cal.calibrated,
            eta: report.eta,
            ratio: report.assertiveness(),
            scenarios: eval.len(),
        });
    }
    Ok(rows)
}

pub const ETA_CSV_HEADER: &str = "model,flops,alpha,eta,ratio";

pub fn write_eta_csv<W: Write>(mut w: W, rows: &[EtaRow]) -> Result<(), ClosedLoopError> {
    writeln!(w, "{ETA_CSV_HEADER}")?;
    for r in rows {
        let ratio = r.ratio.map_or("inf".to_string(), |x| format!("{x:.6e}"));
        writeln!(
            w,
            "{},{:.6e},{:.6e},{},{}",
            r.model, r.flops, r.alpha, r.eta, ratio
        )?;
    }
    Ok(())
}

/// Per-scenario outcome line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub scenario_id: u64,
    pub outcome: Outcome,
    pub progress: f64,
    pub log_progress: f64,
    pub first_collision: Option<usize>,
    pub diagnostic: Option<String>,
}

impl From<&SimResult> for OutcomeRecord {
    fn from(r: &SimResult) -> Self {
        Self {
            scenario_id: r.scenario_id,
            outcome: r.outcome,
            progress: r.progress,
            log_progress: r.log_progress,
            first_collision: r.first_collision,
            diagnostic: r.diagnostic.clone(),
        }
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, rows: &[T]) -> Result<(), ClosedLoopError> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenarios<R: BufRead>(r: R) -> Result<Vec<Scenario>, ClosedLoopError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progress_examples() {
        let route = vec![[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]];
        assert_eq!(progress(&[[0.0, 0.0], [0.0, 0.0]], &route).unwrap(), 0.0);
        assert_eq!(progress(&route, &route).unwrap(), 20.0);
        assert_eq!(progress(&[[10.0, 1.0]], &route).unwrap(), 10.0);
        assert!(progress(&[], &route).is_err());
    }

    #[test]
    fn identical_rollouts_pick_first() {
        let r = vec![vec![[1.0, 0.0], [2.0, 0.0]]; 5];
        assert_eq!(select_plan(&r, &[[0.0, 0.0], [10.0, 0.0]], 1.0).unwrap(), 0);
    }

    #[test]
    fn zero_alpha_is_medoid() {
        let r: Vec<Vec<Point>> = [0.0, 1.0, 1.2, 2.0, 5.0]
            .iter()
            .map(|&y| vec![[1.0, y], [2.0, y]])
            .collect();
        // sums of distances: 9.2, 6.2, 6.0, 6.8, 15.8
        assert_eq!(select_plan(&r, &[[0.0, 0.0], [10.0, 0.0]], 0.0).unwrap(), 2);
    }

    #[test]
    fn hand_scored_selection() {
        let route = vec![[0.0, 0.0], [100.0, 0.0]];
        let r = vec![
            vec![[1.0, 0.0], [2.0, 0.0]],
            vec![[2.0, 0.0], [4.0, 0.0]],
            vec![[3.0, 0.0], [8.0, 0.0]],
        ];
        // ADE(0,1) = 1.5, ADE(0,2) = 4, ADE(1,2) = 2.5; progress 2, 4, 8 (mean 14/3)
        // scores: 5.5/3 + 8/3 = 4.5, 4/3 + 2/3 = 2, 6.5/3 - 10/3 = -7/6
        let s = plan_scores(&r, &route, 1.0).unwrap();
        assert!((s[0] - 4.5).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
        assert!((s[2] + 7.0 / 6.0).abs() < 1e-12);
        assert_eq!(select_plan(&r, &route, 1.0).unwrap(), 2);
        assert_eq!(select_plan(&r, &route, 0.0).unwrap(), 1);
    }

    #[test]
    fn thresholds() {
        let t = ProgressThreshold::default();
        assert_eq!(t.classify(0.0, 50.0), Outcome::UnderProgress);
        assert_eq!(t.classify(46.0, 50.0), Outcome::Ok);
        assert_eq!(t.classify(58.0, 50.0), Outcome::OverProgress);
        assert_eq!(t.classify(4.9, 0.0), Outcome::Ok);
    }

    #[test]
    fn assertiveness_is_none_without_under_progress() {
        let r = FailureReport {
            outcomes: vec![],
            eta: 2,
            over: 2,
            under: 0,
            collisions: 0,
            aborted: 0,
        };
        assert_eq!(r.assertiveness(), None);
    }
}
