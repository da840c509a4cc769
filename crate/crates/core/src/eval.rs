//! Open-loop rollout metrics, rollout aggregation and inference-compute
//! frontiers.

use crate::codec::Point;
use crate::geometry::{dist, wrap_angle, Frame};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {k} rollouts, got {r}")]
    TooFewRollouts { r: usize, k: usize },
    #[error("forecast horizon {forecast} differs from ground truth horizon {gt}")]
    HorizonMismatch { forecast: usize, gt: usize },
    #[error("empty ground truth")]
    EmptyGroundTruth,
    #[error("{0} forecasts for {1} ground truths")]
    CountMismatch(usize, usize),
    #[error("degenerate track")]
    DegenerateTrack,
    #[error("invalid forecast: {0}")]
    InvalidForecast(&'static str),
    #[error("frontier needs at least one non-empty curve")]
    EmptyFrontier,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Track = Vec<Point>;

/// Mean pointwise distance between two equal-length tracks.
pub fn ade(a: &[Point], b: &[Point]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| dist(*p, *q)).sum::<f64>() / a.len() as f64
}

/// K weighted representative trajectories for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredForecast {
    pub trajectories: Vec<Track>,
    pub probabilities: Vec<f64>,
}

impl ClusteredForecast {
    pub fn new(trajectories: Vec<Track>, probabilities: Vec<f64>) -> Result<Self, EvalError> {
        let f = Self {
            trajectories,
            probabilities,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn single(track: Track) -> Self {
        Self {
            trajectories: vec![track],
            probabilities: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trajectories.is_empty() {
            return Err(EvalError::InvalidForecast("no trajectories"));
        }
        if self.trajectories.len() != self.probabilities.len() {
            return Err(EvalError::InvalidForecast("one probability per trajectory"));
        }
        if self.probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(EvalError::InvalidForecast("negative probability"));
        }
        if (self.probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidForecast("probabilities must sum to 1"));
        }
        let t = self.trajectories[0].len();
        if t == 0 || self.trajectories.iter().any(|x| x.len() != t) {
            return Err(EvalError::InvalidForecast("ragged trajectories"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].len()
    }
}

/// Ground truth for one predicted agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGroundTruth {
    /// Position at the current time.
    pub current: Point,
    /// Future positions at the token rate.
    pub future: Track,
    /// Speed at the current time (m/s).
    pub speed: f64,
    /// Seconds between future samples.
    pub step_seconds: f64,
}

impl AgentGroundTruth {
    pub fn horizon_seconds(&self) -> f64 {
        self.future.len() as f64 * self.step_seconds
    }

    /// Current position followed by the future.
    pub fn full_track(&self) -> Track {
        std::iter::once(self.current)
            .chain(self.future.iter().copied())
            .collect()
    }

    fn check(&self, f: &ClusteredForecast) -> Result<(), EvalError> {
        if self.future.is_empty() {
            return Err(EvalError::EmptyGroundTruth);
        }
        if f.horizon() != self.future.len() {
            return Err(EvalError::HorizonMismatch {
                forecast: f.horizon(),
                gt: self.future.len(),
            });
        }
        Ok(())
    }
}

/// Miss tolerances at a reference horizon, scaled by horizon and speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissThresholds {
    pub lateral: f64,
    pub longitudinal: f64,
    pub reference_seconds: f64,
    /// Speed at or below which `low_speed_scale` applies.
    pub low_speed: f64,
    /// Speed at or above which the scale is 1.
    pub high_speed: f64,
    pub low_speed_scale: f64,
}

impl Default for MissThresholds {
    fn default() -> Self {
        Self {
            lateral: 1.0,
            longitudinal: 2.0,
            reference_seconds: 3.0,
            low_speed: 1.4,
            high_speed: 11.0,
            low_speed_scale: 0.5,
        }
    }
}

impl MissThresholds {
    pub fn speed_scale(&self, speed: f64) -> f64 {
        if speed <= self.low_speed {
            self.low_speed_scale
        } else if speed >= self.high_speed {
            1.0
        } else {
            let t = (speed - self.low_speed) / (self.high_speed - self.low_speed);
            self.low_speed_scale + t * (1.0 - self.low_speed_scale)
        }
    }

    /// (lateral, longitudinal) tolerances for a horizon and initial speed.
    pub fn at(&self, horizon_seconds: f64, speed: f64) -> (f64, f64) {
        let s = horizon_seconds / self.reference_seconds * self.speed_scale(speed);
        (self.lateral * s, self.longitudinal * s)
    }
}

/// Direction of the last step longer than `min_step`, if any.
fn final_heading(track: &[Point], min_step: f64) -> Option<f64> {
    track
        .windows(2)
        .rev()
        .find(|w| dist(w[0], w[1]) > min_step)
        .map(|w| (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]))
}

fn first_heading(track: &[Point], min_step: f64) -> Option<f64> {
    track
        .windows(2)
        .find(|w| dist(w[0], w[1]) > min_step)
        .map(|w| (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]))
}

const HEADING_STEP: f64 = 0.05;

/// True when trajectory `pred` ends within tolerance of the ground truth.
pub fn is_hit(pred: &[Point], gt: &AgentGroundTruth, th: &MissThresholds) -> bool {
    let track = gt.full_track();
    let heading = final_heading(&track, HEADING_STEP).unwrap_or(0.0);
    let end = *gt.future.last().unwrap();
    let frame = Frame {
        origin: end,
        heading,
    };
    let e = frame.to_local(*pred.last().unwrap());
    let (lat, lon) = th.at(gt.horizon_seconds(), gt.speed);
    e[0].abs() <= lon && e[1].abs() <= lat
}

pub fn min_ade(f: &ClusteredForecast, gt: &AgentGroundTruth) -> Result<f64, EvalError> {
    gt.check(f)?;
    Ok(f.trajectories
        .iter()
        .map(|t| ade(t, &gt.future))
        .fold(f64::INFINITY, f64::min))
}

pub fn w_ade(f: &ClusteredForecast, gt: &AgentGroundTruth) -> Result<f64, EvalError> {
    gt.check(f)?;
    Ok(f.trajectories
        .iter()
        .zip(&f.probabilities)
        .map(|(t, p)| p * ade(t, &gt.future))
        .sum())
}

pub fn min_fde(f: &ClusteredForecast, gt: &AgentGroundTruth) -> Result<f64, EvalError> {
    gt.check(f)?;
    let end = *gt.future.last().unwrap();
    Ok(f.trajectories
        .iter()
        .map(|t| dist(*t.last().unwrap(), end))
        .fold(f64::INFINITY, f64::min))
}

fn check_pairs(fs: &[ClusteredForecast], gts: &[AgentGroundTruth]) -> Result<(), EvalError> {
    if gts.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    if fs.len() != gts.len() {
        return Err(EvalError::CountMismatch(fs.len(), gts.len()));
    }
    for (f, g) in fs.iter().zip(gts) {
        g.check(f)?;
    }
    Ok(())
}

/// Fraction of agents for which no trajectory is within tolerance.
pub fn miss_rate(
    fs: &[ClusteredForecast],
    gts: &[AgentGroundTruth],
    th: &MissThresholds,
) -> Result<f64, EvalError> {
    check_pairs(fs, gts)?;
    let misses = fs
        .iter()
        .zip(gts)
        .filter(|(f, g)| !f.trajectories.iter().any(|t| is_hit(t, g, th)))
        .count();
    Ok(misses as f64 / gts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Stationary,
    Straight,
    StraightLeft,
    StraightRight,
    Left,
    Right,
    LeftUTurn,
    RightUTurn,
}

impl Bucket {
    pub const ALL: [Bucket; 8] = [
        Bucket::Stationary,
        Bucket::Straight,
        Bucket::StraightLeft,
        Bucket::StraightRight,
        Bucket::Left,
        Bucket::Right,
        Bucket::LeftUTurn,
        Bucket::RightUTurn,
    ];
}

/// Boundaries of the behavior buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketRules {
    pub stationary_displacement: f64,
    pub straight_degrees: f64,
    pub uturn_degrees: f64,
    pub lateral_offset: f64,
}

impl Default for BucketRules {
    fn default() -> Self {
        Self {
            stationary_displacement: 2.0,
            straight_degrees: 15.0,
            uturn_degrees: 135.0,
            lateral_offset: 2.0,
        }
    }
}

/// Signed total heading change of a track, accumulated from wrapped
/// step-direction increments.
pub fn total_heading_change(track: &[Point]) -> f64 {
    let mut prev: Option<f64> = None;
    let mut acc = 0.0;
    for w in track.windows(2) {
        if dist(w[0], w[1]) <= HEADING_STEP {
            continue;
        }
        let h = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
        if let Some(p) = prev {
            acc += wrap_angle(h - p);
        }
        prev = Some(h);
    }
    acc
}

pub fn behavior_bucket(track: &[Point], rules: &BucketRules) -> Result<Bucket, EvalError> {
    if track.len() < 2
        || track
            .iter()
            .any(|p| !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(EvalError::DegenerateTrack);
    }
    let start = track[0];
    let end = *track.last().unwrap();
    if dist(start, end) < rules.stationary_displacement {
        return Ok(Bucket::Stationary);
    }
    let dh = total_heading_change(track).to_degrees();
    if dh.abs() < rules.straight_degrees {
        let h0 = first_heading(track, HEADING_STEP).unwrap_or(0.0);
        let lateral = Frame {
            origin: start,
            heading: h0,
        }
        .to_local(end)[1];
        return Ok(if lateral > rules.lateral_offset {
            Bucket::StraightLeft
        } else if lateral < -rules.lateral_offset {
            Bucket::StraightRight
        } else {
            Bucket::Straight
        });
    }
    Ok(match (dh > 0.0, dh.abs() > rules.uturn_degrees) {
        (true, false) => Bucket::Left,
        (false, false) => Bucket::Right,
        (true, true) => Bucket::LeftUTurn,
        (false, true) => Bucket::RightUTurn,
    })
}

/// Average precision from scored detections: trapezoid area under the
/// precision/recall curve starting at (recall 0, precision 1).
/// `scored` holds (score, is_true_positive) already in ranking order.
pub fn average_precision(ranked_tp: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let (mut r_prev, mut p_prev) = (0.0, 1.0);
    let mut area = 0.0;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let r = tp as f64 / positives as f64;
        let p = tp as f64 / (i + 1) as f64;
        area += (r - r_prev) * 0.5 * (p + p_prev);
        r_prev = r;
        p_prev = p;
    }
    area
}

/// Mean over non-empty behavior buckets of per-bucket AP. Within an agent,
/// only the most probable hit counts as a true positive.
pub fn map_metric(
    fs: &[ClusteredForecast],
    gts: &[AgentGroundTruth],
    th: &MissThresholds,
    rules: &BucketRules,
) -> Result<f64, EvalError> {
    check_pairs(fs, gts)?;
    let mut per_bucket: std::collections::BTreeMap<
        Bucket,
        (usize, Vec<(f64, usize, usize, bool)>),
    > = Default::default();
    for (ai, (f, g)) in fs.iter().zip(gts).enumerate() {
        let bucket = behavior_bucket(&g.full_track(), rules)?;
        let mut order: Vec<usize> = (0..f.k()).collect();
        order.sort_by(|&a, &b| {
            f.probabilities[b]
                .partial_cmp(&f.probabilities[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let tp_idx = order
            .iter()
            .copied()
            .find(|&k| is_hit(&f.trajectories[k], g, th));
        let entry = per_bucket.entry(bucket).or_default();
        entry.0 += 1;
        for k in 0..f.k() {
            entry.1.push((f.probabilities[k], ai, k, Some(k) == tp_idx));
        }
    }
    let mut sum = 0.0;
    for (positives, mut dets) in per_bucket.values().cloned() {
        dets.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let ranked: Vec<bool> = dets.iter().map(|d| d.3).collect();
        sum += average_precision(&ranked, positives);
    }
    Ok(sum / per_bucket.len() as f64)
}

/// Per-agent-averaged open-loop metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub min_ade: f64,
    pub w_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
    pub agents: usize,
}

pub fn evaluate(
    fs: &[ClusteredForecast],
    gts: &[AgentGroundTruth],
    th: &MissThresholds,
    rules: &BucketRules,
) -> Result<OpenLoopMetrics, EvalError> {
    check_pairs(fs, gts)?;
    let n = gts.len() as f64;
    let mut acc = [0.0; 3];
    for (f, g) in fs.iter().zip(gts) {
        acc[0] += min_ade(f, g)?;
        acc[1] += w_ade(f, g)?;
        acc[2] += min_fde(f, g)?;
    }
    Ok(OpenLoopMetrics {
        min_ade: acc[0] / n,
        w_ade: acc[1] / n,
        min_fde: acc[2] / n,
        miss_rate: miss_rate(fs, gts, th)?,
        map: map_metric(fs, gts, th, rules)?,
        agents: gts.len(),
    })
}

/// Clusters `rollouts` into `k` weighted representatives: NMS-style seeding
/// (densest rollout first, then farthest-first) followed by K-means under
/// the ADE distance. Probabilities are member fractions.
pub fn aggregate(
    rollouts: &[Track],
    k: usize,
    suppression_radius: f64,
) -> Result<ClusteredForecast, EvalError> {
    let r = rollouts.len();
    if k == 0 || r < k {
        return Err(EvalError::TooFewRollouts { r, k });
    }
    let t = rollouts[0].len();
    if t == 0 || rollouts.iter().any(|x| x.len() != t) {
        return Err(EvalError::InvalidForecast("ragged rollouts"));
    }
    let mut d = vec![0.0; r * r];
    for i in 0..r {
        for j in i + 1..r {
            let v = ade(&rollouts[i], &rollouts[j]);
            d[i * r + j] = v;
            d[j * r + i] = v;
        }
    }
    let density = |i: usize| {
        (0..r)
            .filter(|&j| d[i * r + j] <= suppression_radius)
            .count()
    };
    let first = (0..r)
        .max_by(|&a, &b| density(a).cmp(&density(b)).then(b.cmp(&a)))
        .unwrap();
    let mut seeds = vec![first];
    let mut nearest: Vec<f64> = (0..r).map(|j| d[first * r + j]).collect();
    while seeds.len() < k {
        let next = (0..r)
            .filter(|j| !seeds.contains(j))
            .max_by(|&a, &b| nearest[a].partial_cmp(&nearest[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        seeds.push(next);
        for j in 0..r {
            nearest[j] = nearest[j].min(d[next * r + j]);
        }
    }
    let mut centroids: Vec<Track> = seeds.iter().map(|&s| rollouts[s].clone()).collect();
    let assign = |cs: &[Track]| -> Vec<usize> {
        rollouts
            .iter()
            .map(|x| {
                let mut best = (f64::INFINITY, 0);
                for (c, centroid) in cs.iter().enumerate() {
                    let v = ade(x, centroid);
                    if v < best.0 {
                        best = (v, c);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut labels = assign(&centroids);
    for _ in 0..500 {
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Track> = rollouts
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == c)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            for s in 0..t {
                let mut p = [0.0; 2];
                for m in &members {
                    p[0] += m[s][0];
                    p[1] += m[s][1];
                }
                centroid[s] = [p[0] * inv, p[1] * inv];
            }
        }
        let next = assign(&centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut probabilities = vec![0.0; k];
    for l in &labels {
        probabilities[*l] += 1.0 / r as f64;
    }
    let total: f64 = probabilities.iter().sum();
    for p in &mut probabilities {
        *p /= total;
    }
    Ok(ClusteredForecast {
        trajectories: centroids,
        probabilities,
    })
}

/// One row of an inference-compute sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub samples: u64,
    pub flops: u64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
}

pub const SWEEP_CSV_HEADER: &str = "samples,flops,min_ade,min_fde,miss_rate,map";

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<(), EvalError> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e}",
            r.samples, r.flops, r.min_ade, r.min_fde, r.miss_rate, r.map
        )?;
    }
    Ok(())
}

/// Prediction/ground-truth interchange record (one per JSONL line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: u64,
    pub agent_id: u32,
    pub trajectories: Vec<Track>,
    pub probabilities: Vec<f64>,
    pub gt: AgentGroundTruth,
}

pub fn write_predictions<W: Write>(mut w: W, recs: &[PredictionRecord]) -> Result<(), EvalError> {
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Metric-vs-compute curve of one model, sorted by FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCurve {
    pub model: String,
    pub points: Vec<(f64, f64)>,
}

impl ModelCurve {
    fn log_points(&self) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|(f, m)| (f.log10(), *m)).collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pts
    }
}

fn interp(pts: &[(f64, f64)], x: f64) -> Option<f64> {
    let (lo, hi) = (pts.first()?.0, pts.last()?.0);
    if x < lo - 1e-12 || x > hi + 1e-12 {
        return None;
    }
    if pts.len() == 1 {
        return Some(pts[0].1);
    }
    let i = pts
        .windows(2)
        .position(|w| x <= w[1].0 + 1e-12)
        .unwrap_or(pts.len() - 2);
    let (a, b) = (pts[i], pts[i + 1]);
    if b.0 == a.0 {
        return Some(a.1.min(b.1));
    }
    let t = ((x - a.0) / (b.0 - a.0)).clamp(0.0, 1.0);
    Some(a.1 + t * (b.1 - a.1))
}

/// Contiguous FLOP range over which one model attains the lowest metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierSegment {
    pub from_flops: f64,
    pub to_flops: f64,
    pub model: String,
}

/// Lower envelope of piecewise-linear (in log FLOPs) metric curves. Ties go
/// to the model whose curve starts at fewer FLOPs.
pub fn crossover_frontier(curves: &[ModelCurve]) -> Result<Vec<FrontierSegment>, EvalError> {
    let curves: Vec<(&ModelCurve, Vec<(f64, f64)>)> = curves
        .iter()
        .filter(|c| !c.points.is_empty())
        .map(|c| (c, c.log_points()))
        .collect();
    if curves.is_empty() {
        return Err(EvalError::EmptyFrontier);
    }
    let mut xs: Vec<f64> = curves
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.0))
        .collect();
    // pairwise segment intersections
    for (i, (_, a)) in curves.iter().enumerate() {
        for (_, b) in curves.iter().skip(i + 1) {
            for sa in a.windows(2) {
                for sb in b.windows(2) {
                    let lo = sa[0].0.max(sb[0].0);
                    let hi = sa[1].0.min(sb[1].0);
                    if hi <= lo {
                        continue;
                    }
                    let ya = |x: f64| {
                        sa[0].1 + (x - sa[0].0) * (sa[1].1 - sa[0].1) / (sa[1].0 - sa[0].0)
                    };
                    let yb = |x: f64| {
                        sb[0].1 + (x - sb[0].0) * (sb[1].1 - sb[0].1) / (sb[1].0 - sb[0].0)
                    };
                    let (d0, d1) = (ya(lo) - yb(lo), ya(hi) - yb(hi));
                    if d0 * d1 < 0.0 {
                        xs.push(lo + (hi - lo) * d0 / (d0 - d1));
                    }
                }
            }
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    let start_of = |i: usize| curves[i].1[0].0;
    let best_at = |x: f64| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, (_, pts)) in curves.iter().enumerate() {
            if let Some(y) = interp(pts, x) {
                let better = match best {
                    None => true,
                    Some((by, bi)) => {
                        let tol = 1e-12 * by.abs().max(y.abs()).max(1.0);
                        y < by - tol || ((y - by).abs() <= tol && start_of(i) < start_of(bi))
                    }
                };
                if better {
                    best = Some((y, i));
                }
            }
        }
        best.map(|b| b.1)
    };
    let mut out: Vec<FrontierSegment> = Vec::new();
    let push = |out: &mut Vec<FrontierSegment>, lo: f64, hi: f64, idx: usize| {
        let name = &curves[idx].0.model;
        let (flo, fhi) = (10f64.powf(lo), 10f64.powf(hi));
        match out.last_mut() {
            Some(last) if &last.model == name && (last.to_flops / flo - 1.0).abs() < 1e-9 => {
                last.to_flops = fhi
            }
            _ => out.push(FrontierSegment {
                from_flops: flo,
                to_flops: fhi,
                model: name.clone(),
            }),
        }
    };
    if xs.len() == 1 {
        if let Some(i) = best_at(xs[0]) {
            push(&mut out, xs[0], xs[0], i);
        }
    }
    for w in xs.windows(2) {
        if let Some(i) = best_at(0.5 * (w[0] + w[1])) {
            push(&mut out, w[0], w[1], i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, dy: f64) -> Track {
        (1..=n).map(|i| [i as f64, dy]).collect()
    }

    fn gt_line(n: usize) -> AgentGroundTruth {
        AgentGroundTruth {
            current: [0.0, 0.0],
            future: line(n, 0.0),
            speed: 2.0,
            step_seconds: 0.5,
        }
    }

    #[test]
    fn exact_match_scores_zero() {
        let g = gt_line(6);
        let f = ClusteredForecast::single(g.future.clone());
        assert_eq!(min_ade(&f, &g).unwrap(), 0.0);
        assert_eq!(w_ade(&f, &g).unwrap(), 0.0);
        assert_eq!(min_fde(&f, &g).unwrap(), 0.0);
        let th = MissThresholds::default();
        assert_eq!(miss_rate(&[f.clone()], &[g.clone()], &th).unwrap(), 0.0);
        assert_eq!(
            map_metric(&[f], &[g], &th, &BucketRules::default()).unwrap(),
            1.0
        );
    }

    #[test]
    fn weighted_ade() {
        let g = gt_line(4);
        let far: Track = g.future.iter().map(|p| [p[0], p[1] + 2.0]).collect();
        let f = ClusteredForecast::new(vec![g.future.clone(), far], vec![0.25, 0.75]).unwrap();
        assert_eq!(w_ade(&f, &g).unwrap(), 1.5);
        assert_eq!(min_ade(&f, &g).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let g = gt_line(5);
        let f = ClusteredForecast::single(g.future.iter().map(|p| [p[0] + 1.0, p[1]]).collect());
        assert!((min_ade(&f, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!((min_fde(&f, &g).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn horizon_mismatch_and_empty_gt() {
        let g = gt_line(5);
        let f = ClusteredForecast::single(line(4, 0.0));
        assert!(matches!(
            min_ade(&f, &g),
            Err(EvalError::HorizonMismatch { .. })
        ));
        assert!(matches!(
            miss_rate(&[], &[], &MissThresholds::default()),
            Err(EvalError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn thresholds_scale_with_horizon_and_speed() {
        let th = MissThresholds::default();
        assert_eq!(th.at(3.0, 20.0), (1.0, 2.0));
        assert_eq!(th.at(6.0, 20.0), (2.0, 4.0));
        assert_eq!(th.at(3.0, 1.0), (0.5, 1.0));
        let mid = th.speed_scale(0.5 * (1.4 + 11.0));
        assert!((mid - 0.75).abs() < 1e-12);
    }

    #[test]
    fn buckets() {
        let r = BucketRules::default();
        assert_eq!(
            behavior_bucket(&[[0.0, 0.0]; 5], &r).unwrap(),
            Bucket::Stationary
        );
        let straight: Track = (0..=50).map(|i| [i as f64, 0.0]).collect();
        assert_eq!(behavior_bucket(&straight, &r).unwrap(), Bucket::Straight);
        // lane change to the left: 3.5 m smoothstep between x = 20 and x = 30
        let lane_change: Track = (0..=50)
            .map(|i| {
                let u = ((i as f64 - 20.0) / 10.0).clamp(0.0, 1.0);
                [i as f64, 3.5 * u * u * (3.0 - 2.0 * u)]
            })
            .collect();
        assert_eq!(
            behavior_bucket(&lane_change, &r).unwrap(),
            Bucket::StraightLeft
        );
        // quarter circle to the right
        let right: Track = (0..=20)
            .map(|i| {
                let a = FRAC_PI_2 * i as f64 / 20.0;
                [10.0 * a.sin(), -10.0 + 10.0 * a.cos()]
            })
            .collect();
        assert_eq!(behavior_bucket(&right, &r).unwrap(), Bucket::Right);
        // clockwise turn of 170 degrees with a 3 m radius
        let uturn: Track = (0..=34)
            .map(|i| {
                let a = (170f64).to_radians() * i as f64 / 34.0;
                [3.0 * a.sin(), -3.0 + 3.0 * a.cos()]
            })
            .collect();
        assert_eq!(behavior_bucket(&uturn, &r).unwrap(), Bucket::RightUTurn);
        assert!(behavior_bucket(&[[0.0, 0.0]], &r).is_err());
        assert!(behavior_bucket(&[[f64::NAN, 0.0], [1.0, 0.0]], &r).is_err());
    }

    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn trapezoid_ap() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        // TP, FP, TP over 2 positives: points (0,1) (.5,1) (.5,.5) (1,2/3)
        let ap = average_precision(&[true, false, true], 2);
        let expected = 0.5 * 1.0 + 0.5 * 0.5 * (0.5 + 2.0 / 3.0);
        assert!((ap - expected).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false], 3), 0.0);
    }

    #[test]
    fn aggregate_identical_rollouts() {
        let r = vec![line(5, 0.0); 10];
        let f = aggregate(&r, 1, 1.0).unwrap();
        assert_eq!(f.probabilities, vec![1.0]);
        assert_eq!(f.trajectories[0], line(5, 0.0));
        assert!(aggregate(&r, 11, 1.0).is_err());
    }

    #[test]
    fn aggregate_two_bundles() {
        let mut r = Vec::new();
        for i in 0..32 {
            r.push(line(4, 10.0 + 0.01 * (i % 4) as f64));
            r.push(line(4, -10.0 - 0.01 * (i % 4) as f64));
        }
        let f = aggregate(&r, 2, 1.0).unwrap();
        assert_eq!(f.probabilities, vec![0.5, 0.5]);
        let mut ys: Vec<f64> = f.trajectories.iter().map(|t| t[0][1]).collect();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ys[0] + 10.015).abs() < 1e-12 && (ys[1] - 10.015).abs() < 1e-12);
    }

    #[test]
    fn single_curve_frontier() {
        let c = ModelCurve {
            model: "a".into(),
            points: vec![(1e3, 3.0), (1e4, 2.0), (1e5, 1.5)],
        };
        let f = crossover_frontier(&[c]).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].model, "a");
        assert!((f[0].from_flops - 1e3).abs() < 1e-6 && (f[0].to_flops - 1e5).abs() < 1e-3);
        assert!(crossover_frontier(&[]).is_err());
    }

    #[test]
    fn crossing_curves() {
        // in log10 flops: small 3 - x/4, large 4 - x/2, equal at x = 4
        let mk = |name: &str, f: fn(f64) -> f64| ModelCurve {
            model: name.into(),
            points: [2.0, 3.0, 4.0, 5.0, 6.0]
                .iter()
                .map(|&x| (10f64.powf(x), f(x)))
                .collect(),
        };
        let small = mk("small", |x| 3.0 - 0.25 * x);
        let large = mk("large", |x| 4.0 - 0.5 * x);
        let dominated = mk("bad", |x| 9.0 - 0.1 * x);
        let f = crossover_frontier(&[large, small, dominated]).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].model, "small");
        assert_eq!(f[1].model, "large");
        assert!((f[0].to_flops.log10() - 4.0).abs() < 1e-9);
        assert!(f.iter().all(|s| s.model != "bad"));
    }
}
