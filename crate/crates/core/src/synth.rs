//! Deterministic synthetic driving worlds.
//!
//! Every segment is a four-way intersection populated with an AV and other
//! agents that follow line/arc/weave paths under bounded-acceleration speed
//! profiles. Agents are placed by rejection so that logged boxes never
//! overlap. Segments are sliced into training examples with a sliding window
//! and the futures are tokenized with the motion codec.

use crate::codec::{self, AgentTrack, Point, Token, TokenVocab};
use crate::geometry::{dist, wrap_angle, Frame, Obb, Polyline};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

pub const METERS_PER_MILE: f64 = 1609.344;
const LANE_WIDTH: f64 = 3.5;
const ROAD_HALF_LENGTH: f64 = 800.0;
const PLACEMENT_MARGIN: f64 = 1.5;
const PLACEMENT_ATTEMPTS: usize = 30;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("segment lasts {have:.2} s but a window needs {need:.2} s")]
    SegmentTooShort { have: f64, need: f64 },
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Av,
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 4] = [
        AgentType::Av,
        AgentType::Vehicle,
        AgentType::Pedestrian,
        AgentType::Cyclist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentType::Av => "av",
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::Cyclist => "cyclist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Straight,
    TurnLeft,
    TurnRight,
    UTurn,
    StopAndGo,
    PedestrianCrossing,
    CyclistWeaving,
    Parked,
}

/// Relative frequencies of the behavior families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub straight: f64,
    pub turns: f64,
    pub u_turns: f64,
    pub stop_and_go: f64,
    pub pedestrian_crossings: f64,
    pub cyclist_weaving: f64,
}

impl MixtureWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.straight,
            self.turns,
            self.u_turns,
            self.stop_and_go,
            self.pedestrian_crossings,
            self.cyclist_weaving,
        ]
    }

    /// Expected fraction of non-AV agents of each type.
    pub fn type_fractions(&self) -> [(AgentType, f64); 3] {
        let w = self.as_array();
        let total: f64 = w.iter().sum();
        [
            (AgentType::Vehicle, (w[0] + w[1] + w[2] + w[3]) / total),
            (AgentType::Pedestrian, w[4] / total),
            (AgentType::Cyclist, w[5] / total),
        ]
    }

    pub fn only_straight() -> Self {
        Self {
            straight: 1.0,
            turns: 0.0,
            u_turns: 0.0,
            stop_and_go: 0.0,
            pedestrian_crossings: 0.0,
            cyclist_weaving: 0.0,
        }
    }
}

impl Default for MixtureWeights {
    fn default() -> Self {
        Self {
            straight: 0.35,
            turns: 0.2,
            u_turns: 0.05,
            stop_and_go: 0.1,
            pedestrian_crossings: 0.15,
            cyclist_weaving: 0.15,
        }
    }
}

/// Seeded variation applied to nominal behavior parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    /// Relative spread of cruise speeds.
    pub speed: f64,
    /// Meters of spread on start positions.
    pub start: f64,
    /// Seconds of spread on waiting times.
    pub wait: f64,
}

impl Default for NoiseScales {
    fn default() -> Self {
        Self {
            speed: 0.2,
            start: 40.0,
            wait: 3.0,
        }
    }
}

/// Fixed slot counts of the scene tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSlots {
    pub agents: usize,
    pub roadgraph: usize,
    pub traffic_lights: usize,
    pub route: usize,
}

impl SceneSlots {
    /// Encoder tokens, including the always-valid summary token.
    pub fn scene_tokens(&self) -> usize {
        1 + self.agents + self.roadgraph + self.traffic_lights + self.route
    }
}

impl Default for SceneSlots {
    fn default() -> Self {
        // 1 + 16 + 32 + 4 + 11 = 64 scene tokens
        Self {
            agents: 16,
            roadgraph: 32,
            traffic_lights: 4,
            route: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_segments: usize,
    /// Agents per scene, including the AV.
    pub agents_per_scene: usize,
    /// Modeled agents per example.
    pub modeled_agents: usize,
    pub segment_seconds: f64,
    pub sim_dt: f64,
    pub history_seconds: f64,
    pub future_seconds: f64,
    pub stride_seconds: f64,
    pub mixture: MixtureWeights,
    pub noise: NoiseScales,
    /// Bound on the magnitude of any agent's acceleration (m/s^2).
    pub max_accel: f64,
    pub slots: SceneSlots,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_segments: 64,
            agents_per_scene: 16,
            modeled_agents: 8,
            segment_seconds: 30.0,
            sim_dt: 0.1,
            history_seconds: 5.0,
            future_seconds: 11.0,
            stride_seconds: 1.5,
            mixture: MixtureWeights::default(),
            noise: NoiseScales::default(),
            max_accel: 4.0,
            slots: SceneSlots::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let w = self.mixture.as_array();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(SynthError::InvalidConfig(
                "mixture weights must be non-negative".into(),
            ));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidConfig(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if self.modeled_agents == 0 || self.modeled_agents > self.agents_per_scene {
            return Err(SynthError::InvalidConfig(
                "need 1 <= modeled_agents <= agents_per_scene".into(),
            ));
        }
        if self.slots.agents < self.modeled_agents {
            return Err(SynthError::InvalidConfig(
                "agent slots must hold the modeled agents".into(),
            ));
        }
        if !(self.sim_dt > 0.0 && self.max_accel > 0.0) {
            return Err(SynthError::InvalidConfig(
                "sim_dt and max_accel must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Scaled-down world used by the toy experiments and tests.
    pub fn toy() -> Self {
        Self {
            agents_per_scene: 8,
            modeled_agents: 4,
            slots: SceneSlots {
                agents: 8,
                roadgraph: 12,
                traffic_lights: 2,
                route: 6,
            },
            ..Self::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Paths

#[derive(Debug, Clone, Copy, PartialEq)]
enum Primitive {
    Line {
        start: Point,
        heading: f64,
        length: f64,
    },
    /// `sweep` is signed (positive = left turn).
    Arc {
        center: Point,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
    Weave {
        start: Point,
        heading: f64,
        length: f64,
        amplitude: f64,
        wavelength: f64,
    },
}

impl Primitive {
    fn length(&self) -> f64 {
        match *self {
            Primitive::Line { length, .. } | Primitive::Weave { length, .. } => length,
            Primitive::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn curvature(&self) -> f64 {
        match *self {
            Primitive::Line { .. } => 0.0,
            Primitive::Arc { radius, .. } => 1.0 / radius,
            Primitive::Weave {
                amplitude,
                wavelength,
                ..
            } => {
                let k = 2.0 * PI / wavelength;
                amplitude * k * k
            }
        }
    }

    fn pose_at(&self, s: f64) -> (Point, f64) {
        match *self {
            Primitive::Line { start, heading, .. } => {
                let (sn, c) = heading.sin_cos();
                ([start[0] + c * s, start[1] + sn * s], heading)
            }
            Primitive::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let dir = sweep.signum();
                let ang = start_angle + dir * s / radius;
                let p = [
                    center[0] + radius * ang.cos(),
                    center[1] + radius * ang.sin(),
                ];
                (p, wrap_angle(ang + dir * FRAC_PI_2))
            }
            Primitive::Weave {
                start,
                heading,
                amplitude,
                wavelength,
                ..
            } => {
                let (sn, c) = heading.sin_cos();
                let k = 2.0 * PI / wavelength;
                let off = amplitude * (k * s).sin();
                let slope = amplitude * k * (k * s).cos();
                let p = [start[0] + c * s - sn * off, start[1] + sn * s + c * off];
                (p, wrap_angle(heading + slope.atan()))
            }
        }
    }

    fn end_pose(&self) -> (Point, f64) {
        self.pose_at(self.length())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Path {
    parts: Vec<Primitive>,
}

impl Path {
    fn length(&self) -> f64 {
        self.parts.iter().map(Primitive::length).sum()
    }

    fn locate(&self, mut s: f64) -> (&Primitive, f64) {
        let last = self.parts.len() - 1;
        for (i, p) in self.parts.iter().enumerate() {
            let l = p.length();
            if s <= l || i == last {
                return (p, s.min(l).max(0.0));
            }
            s -= l;
        }
        unreachable!()
    }

    fn pose_at(&self, s: f64) -> (Point, f64) {
        let (p, local) = self.locate(s);
        p.pose_at(local)
    }

    fn curvature_at(&self, s: f64) -> f64 {
        self.locate(s).0.curvature()
    }

    fn rotated(&self, angle: f64) -> Path {
        let rot = |p: Point| crate::geometry::rotate(p, angle);
        let parts = self
            .parts
            .iter()
            .map(|p| match *p {
                Primitive::Line {
                    start,
                    heading,
                    length,
                } => Primitive::Line {
                    start: rot(start),
                    heading: wrap_angle(heading + angle),
                    length,
                },
                Primitive::Arc {
                    center,
                    radius,
                    start_angle,
                    sweep,
                } => Primitive::Arc {
                    center: rot(center),
                    radius,
                    start_angle: start_angle + angle,
                    sweep,
                },
                Primitive::Weave {
                    start,
                    heading,
                    length,
                    amplitude,
                    wavelength,
                } => Primitive::Weave {
                    start: rot(start),
                    heading: wrap_angle(heading + angle),
                    length,
                    amplitude,
                    wavelength,
                },
            })
            .collect();
        Path { parts }
    }
}

fn line_from(start: Point, heading: f64, length: f64) -> Primitive {
    Primitive::Line {
        start,
        heading,
        length,
    }
}

/// Paths in the canonical eastbound approach frame; rotated afterwards.
fn canonical_path(behavior: Behavior) -> Path {
    let r = ROAD_HALF_LENGTH;
    let y = -0.5 * LANE_WIDTH;
    match behavior {
        Behavior::Straight | Behavior::StopAndGo | Behavior::Parked => Path {
            parts: vec![line_from([-r, y], 0.0, 2.0 * r)],
        },
        Behavior::TurnLeft => {
            let radius = 10.0;
            let xe = 0.5 * LANE_WIDTH - radius;
            let a = line_from([-r, y], 0.0, r + xe);
            let arc = Primitive::Arc {
                center: [xe, y + radius],
                radius,
                start_angle: -FRAC_PI_2,
                sweep: FRAC_PI_2,
            };
            let (p, h) = arc.end_pose();
            Path {
                parts: vec![a, arc, line_from(p, h, r)],
            }
        }
        Behavior::TurnRight => {
            let radius = 7.0;
            let xe = -0.5 * LANE_WIDTH - radius;
            let a = line_from([-r, y], 0.0, r + xe);
            let arc = Primitive::Arc {
                center: [xe, y - radius],
                radius,
                start_angle: FRAC_PI_2,
                sweep: -FRAC_PI_2,
            };
            let (p, h) = arc.end_pose();
            Path {
                parts: vec![a, arc, line_from(p, h, r)],
            }
        }
        Behavior::UTurn => {
            let radius = 0.5 * LANE_WIDTH;
            let xe = -6.0;
            let a = line_from([-r, y], 0.0, r + xe);
            let arc = Primitive::Arc {
                center: [xe, 0.0],
                radius,
                start_angle: -FRAC_PI_2,
                sweep: PI,
            };
            let (p, h) = arc.end_pose();
            Path {
                parts: vec![a, arc, line_from(p, h, r)],
            }
        }
        Behavior::PedestrianCrossing => Path {
            parts: vec![line_from([-8.0, -40.0], FRAC_PI_2, 80.0)],
        },
        Behavior::CyclistWeaving => Path {
            parts: vec![Primitive::Weave {
                start: [-r, -LANE_WIDTH + 0.6],
                heading: 0.0,
                length: 2.0 * r,
                amplitude: 0.4,
                wavelength: 20.0,
            }],
        },
    }
}

// ---------------------------------------------------------------------------
// Speed profiles

struct SpeedProfile {
    s: Vec<f64>,
    v: Vec<f64>,
    t: Vec<f64>,
}

struct SpeedLimits {
    cruise: f64,
    accel: f64,
    decel: f64,
    lateral: f64,
}

impl SpeedProfile {
    /// Forward/backward pass over an arc-length grid with optional stops
    /// `(arc length, wait seconds)`.
    fn plan(
        path: &Path,
        s0: f64,
        v0: f64,
        horizon_m: f64,
        lim: &SpeedLimits,
        stops: &[(f64, f64)],
    ) -> Self {
        let ds = 0.5;
        let s_end = (s0 + horizon_m).min(path.length());
        let n = (((s_end - s0) / ds).floor() as usize).max(1) + 1;
        let s: Vec<f64> = (0..n).map(|i| s0 + i as f64 * ds).collect();
        let mut cap: Vec<f64> = s
            .iter()
            .map(|&x| {
                let k = path
                    .curvature_at(x)
                    .max(path.curvature_at((x - ds).max(0.0)))
                    .max(path.curvature_at(x + ds));
                if k > 0.0 {
                    lim.cruise.min((lim.lateral / k).sqrt())
                } else {
                    lim.cruise
                }
            })
            .collect();
        let mut stop_idx = Vec::new();
        for &(at, wait) in stops {
            if at > s0 && at < s_end {
                let i = ((at - s0) / ds).round() as usize;
                cap[i] = 0.0;
                stop_idx.push((i, wait));
            }
        }
        let mut v = vec![0.0; n];
        v[0] = v0.min(cap[0]);
        for i in 0..n - 1 {
            v[i + 1] = cap[i + 1].min((v[i] * v[i] + 2.0 * lim.accel * ds).sqrt());
        }
        for i in (0..n - 1).rev() {
            v[i] = v[i].min((v[i + 1] * v[i + 1] + 2.0 * lim.decel * ds).sqrt());
        }
        let mut nodes_s = Vec::with_capacity(n + stop_idx.len());
        let mut nodes_v = Vec::with_capacity(n + stop_idx.len());
        let mut nodes_t = Vec::with_capacity(n + stop_idx.len());
        let mut t = 0.0;
        for i in 0..n {
            if i > 0 {
                let vs = v[i - 1] + v[i];
                t += if vs > 0.0 { 2.0 * ds / vs } else { 0.0 };
            }
            nodes_s.push(s[i]);
            nodes_v.push(v[i]);
            nodes_t.push(t);
            if let Some(&(_, wait)) = stop_idx.iter().find(|(j, _)| *j == i) {
                t += wait;
                nodes_s.push(s[i]);
                nodes_v.push(0.0);
                nodes_t.push(t);
            }
        }
        Self {
            s: nodes_s,
            v: nodes_v,
            t: nodes_t,
        }
    }

    /// Arc length and speed at time `time`.
    fn at(&self, time: f64) -> (f64, f64) {
        let last = self.t.len() - 1;
        if time >= self.t[last] {
            return (self.s[last], 0.0);
        }
        let i = match self.t.binary_search_by(|x| x.partial_cmp(&time).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let ds = self.s[i + 1] - self.s[i];
        if ds <= 0.0 {
            return (self.s[i], 0.0);
        }
        let (v0, v1) = (self.v[i], self.v[i + 1]);
        let a = (v1 * v1 - v0 * v0) / (2.0 * ds);
        let tau = time - self.t[i];
        let s = (self.s[i] + v0 * tau + 0.5 * a * tau * tau).min(self.s[i + 1]);
        (s, (v0 + a * tau).max(0.0))
    }
}

// ---------------------------------------------------------------------------
// Scene types

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadKind {
    Lane,
    Edge,
    Crosswalk,
    StopLine,
}

impl RoadKind {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
}

impl LightState {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub kind: RoadKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub position: [f64; 3],
    pub state: LightState,
    pub confidence: f64,
}

/// One agent's log at `sim_dt` resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedAgent {
    pub id: u32,
    pub agent_type: AgentType,
    pub behavior: Behavior,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub positions: Vec<Point>,
    pub headings: Vec<f64>,
    pub speeds: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LoggedAgent {
    pub fn obb(&self, k: usize) -> Obb {
        Obb {
            center: self.positions[k],
            heading: self.headings[k],
            length: self.length,
            width: self.width,
        }
    }

    /// Distance travelled over the whole log.
    pub fn arc_length(&self) -> f64 {
        self.positions.windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

/// A logged run segment. `agents[0]` is always the AV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u64,
    pub dt: f64,
    pub agents: Vec<LoggedAgent>,
    pub roadgraph: Vec<RoadSegment>,
    pub traffic_lights: Vec<TrafficLight>,
    /// AV route polyline.
    pub route: Vec<Point>,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        (self.agents[0].positions.len() - 1) as f64 * self.dt
    }

    pub fn av(&self) -> &LoggedAgent {
        &self.agents[0]
    }

    /// Sum of per-agent arc lengths, in miles.
    pub fn miles(&self) -> f64 {
        self.agents.iter().map(LoggedAgent::arc_length).sum::<f64>() / METERS_PER_MILE
    }
}

fn mix_seed(seed: u64, id: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded RNG for a named stream within a world.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn build_roadgraph() -> Vec<RoadSegment> {
    let mut out = Vec::new();
    let piece = 10.0;
    let r = ROAD_HALF_LENGTH;
    let add_line = |out: &mut Vec<RoadSegment>, a: Point, b: Point, kind: RoadKind| {
        let len = dist(a, b);
        let n = (len / piece).ceil().max(1.0) as usize;
        for i in 0..n {
            let t0 = i as f64 / n as f64;
            let t1 = (i + 1) as f64 / n as f64;
            let p = |t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            let (s, e) = (p(t0), p(t1));
            out.push(RoadSegment {
                start: [s[0], s[1], 0.0],
                end: [e[0], e[1], 0.0],
                kind,
            });
        }
    };
    let h = 0.5 * LANE_WIDTH;
    for k in 0..4 {
        let ang = k as f64 * FRAC_PI_2;
        let rot = |p: Point| crate::geometry::rotate(p, ang);
        // lane centerline and right road edge of this approach, both arms
        add_line(&mut out, rot([-r, -h]), rot([r, -h]), RoadKind::Lane);
        add_line(
            &mut out,
            rot([-r, -LANE_WIDTH]),
            rot([-LANE_WIDTH, -LANE_WIDTH]),
            RoadKind::Edge,
        );
        add_line(
            &mut out,
            rot([LANE_WIDTH, -LANE_WIDTH]),
            rot([r, -LANE_WIDTH]),
            RoadKind::Edge,
        );
        add_line(
            &mut out,
            rot([-8.0, -LANE_WIDTH]),
            rot([-8.0, LANE_WIDTH]),
            RoadKind::Crosswalk,
        );
        add_line(
            &mut out,
            rot([-LANE_WIDTH - 1.0, -LANE_WIDTH]),
            rot([-LANE_WIDTH - 1.0, 0.0]),
            RoadKind::StopLine,
        );
    }
    out
}

fn sample_behavior(rng: &mut ChaCha8Rng, w: &[f64; 6], vehicle_only: bool) -> Behavior {
    let mut w = *w;
    if vehicle_only {
        w[4] = 0.0;
        w[5] = 0.0;
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Behavior::Straight;
    }
    let mut u = rng.random::<f64>() * total;
    let mut family = 5;
    for (i, x) in w.iter().enumerate() {
        if u < *x {
            family = i;
            break;
        }
        u -= x;
    }
    if w[family] == 0.0 {
        family = w.iter().rposition(|x| *x > 0.0).unwrap();
    }
    match family {
        0 => Behavior::Straight,
        1 => {
            if rng.random::<bool>() {
                Behavior::TurnLeft
            } else {
                Behavior::TurnRight
            }
        }
        2 => Behavior::UTurn,
        3 => Behavior::StopAndGo,
        4 => Behavior::PedestrianCrossing,
        _ => Behavior::CyclistWeaving,
    }
}

fn type_for(behavior: Behavior) -> AgentType {
    match behavior {
        Behavior::PedestrianCrossing => AgentType::Pedestrian,
        Behavior::CyclistWeaving => AgentType::Cyclist,
        _ => AgentType::Vehicle,
    }
}

fn extents(agent_type: AgentType, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    match agent_type {
        AgentType::Av => (4.8, 2.0, 1.6),
        AgentType::Vehicle => (
            uniform(rng, 4.0, 5.2),
            uniform(rng, 1.8, 2.1),
            uniform(rng, 1.4, 2.0),
        ),
        AgentType::Pedestrian => (0.6, 0.6, uniform(rng, 1.5, 1.9)),
        AgentType::Cyclist => (1.8, 0.7, 1.7),
    }
}

struct Draft {
    positions: Vec<Point>,
    headings: Vec<f64>,
    speeds: Vec<f64>,
}

/// Samples one candidate trajectory for a behavior.
fn draft(rng: &mut ChaCha8Rng, behavior: Behavior, cfg: &WorldConfig, samples: usize) -> Draft {
    let noise = &cfg.noise;
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + noise.speed * uniform(rng, -1.0, 1.0);
    let a_long = (0.45 * cfg.max_accel).min(2.0);
    let a_lat = (0.55 * cfg.max_accel).min(2.5);
    let mut lim = SpeedLimits {
        cruise: 10.0,
        accel: a_long,
        decel: a_long,
        lateral: a_lat,
    };
    let approach = rng.random_range(0..4) as f64 * FRAC_PI_2;
    let mut stops = Vec::new();
    let r = ROAD_HALF_LENGTH;
    let (path, start_x) = match behavior {
        Behavior::Straight => {
            lim.cruise = 11.0 * jitter(rng);
            (
                canonical_path(behavior),
                uniform(rng, -40.0 - noise.start * 2.0, 20.0),
            )
        }
        Behavior::TurnLeft | Behavior::TurnRight | Behavior::UTurn => {
            lim.cruise = 9.0 * jitter(rng);
            (
                canonical_path(behavior),
                uniform(rng, -20.0 - noise.start, -15.0),
            )
        }
        Behavior::StopAndGo => {
            lim.cruise = 9.0 * jitter(rng);
            let x0 = uniform(rng, -20.0 - noise.start, -10.0);
            let wait = uniform(rng, 1.0, 1.0 + noise.wait.max(0.0));
            stops.push((r + x0 + uniform(rng, 15.0, 60.0), wait));
            (canonical_path(behavior), x0)
        }
        Behavior::PedestrianCrossing => {
            lim.cruise = 1.4 * jitter(rng);
            lim.accel = 0.8;
            lim.decel = 0.8;
            let wait = uniform(rng, 0.0, noise.wait.max(0.0));
            // waits at the curb before crossing
            stops.push((40.0 - LANE_WIDTH - 0.5, wait));
            (canonical_path(behavior), uniform(rng, -30.0, 0.0))
        }
        Behavior::CyclistWeaving => {
            lim.cruise = 4.5 * jitter(rng);
            lim.accel = 1.0;
            lim.decel = 1.0;
            (
                canonical_path(behavior),
                uniform(rng, -30.0 - noise.start, 30.0),
            )
        }
        Behavior::Parked => unreachable!(),
    };
    let path = path.rotated(approach);
    let s0 = match behavior {
        Behavior::PedestrianCrossing => start_x + 30.0,
        _ => r + start_x,
    };
    let v0 = lim.cruise * uniform(rng, 0.6, 1.0);
    let horizon = lim.cruise * (samples as f64 * cfg.sim_dt) + 20.0;
    let profile = SpeedProfile::plan(&path, s0, v0, horizon, &lim, &stops);
    let mut positions = Vec::with_capacity(samples);
    let mut headings = Vec::with_capacity(samples);
    let mut speeds = Vec::with_capacity(samples);
    for k in 0..samples {
        let (s, v) = profile.at(k as f64 * cfg.sim_dt);
        let (p, h) = path.pose_at(s);
        positions.push([round6(p[0]), round6(p[1])]);
        headings.push(round6(h));
        speeds.push(round6(v));
    }
    Draft {
        positions,
        headings,
        speeds,
    }
}

fn parked(rng: &mut ChaCha8Rng, samples: usize) -> Draft {
    let sx = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let sy = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let p = [
        round6(sx * uniform(rng, 15.0, 60.0)),
        round6(sy * uniform(rng, 15.0, 60.0)),
    ];
    let h = round6(uniform(rng, -PI, PI));
    Draft {
        positions: vec![p; samples],
        headings: vec![h; samples],
        speeds: vec![0.0; samples],
    }
}

fn conflicts(d: &Draft, dims: (f64, f64), others: &[LoggedAgent]) -> bool {
    others.iter().any(|o| {
        (0..d.positions.len()).any(|k| {
            let a = Obb {
                center: d.positions[k],
                heading: d.headings[k],
                length: dims.0,
                width: dims.1,
            }
            .inflated(PLACEMENT_MARGIN);
            a.overlaps(&o.obb(k))
        })
    })
}

/// Generates one logged segment lasting `config.segment_seconds`.
pub fn generate_segment(config: &WorldConfig, id: u64) -> Segment {
    generate_segment_with_duration(config, id, config.segment_seconds)
}

pub fn generate_segment_with_duration(config: &WorldConfig, id: u64, seconds: f64) -> Segment {
    let mut rng = stream_rng(config.seed, id);
    let samples = (seconds / config.sim_dt).round() as usize + 1;
    let weights = config.mixture.as_array();
    let mut agents: Vec<LoggedAgent> = Vec::with_capacity(config.agents_per_scene);

    let av_behavior = sample_behavior(&mut rng, &weights, true);
    let d = draft(&mut rng, av_behavior, config, samples);
    let (l, w, h) = extents(AgentType::Av, &mut rng);
    agents.push(LoggedAgent {
        id: 0,
        agent_type: AgentType::Av,
        behavior: av_behavior,
        length: l,
        width: w,
        height: h,
        valid: vec![true; samples],
        positions: d.positions,
        headings: d.headings,
        speeds: d.speeds,
    });

    for idx in 1..config.agents_per_scene {
        let behavior = sample_behavior(&mut rng, &weights, false);
        let agent_type = type_for(behavior);
        let dims = extents(agent_type, &mut rng);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand = draft(&mut rng, behavior, config, samples);
            if !conflicts(&cand, (dims.0, dims.1), &agents) {
                placed = Some((cand, behavior));
                break;
            }
        }
        let (d, behavior) = match placed {
            Some(x) => x,
            None => loop {
                let cand = parked(&mut rng, samples);
                if !conflicts(&cand, (dims.0, dims.1), &agents) {
                    break (cand, Behavior::Parked);
                }
            },
        };
        agents.push(LoggedAgent {
            id: idx as u32,
            agent_type,
            behavior,
            length: dims.0,
            width: dims.1,
            height: dims.2,
            valid: vec![true; samples],
            positions: d.positions,
            headings: d.headings,
            speeds: d.speeds,
        });
    }

    let mut traffic_lights = Vec::new();
    for k in 0..4 {
        let p =
            crate::geometry::rotate([-LANE_WIDTH - 1.0, -0.5 * LANE_WIDTH], k as f64 * FRAC_PI_2);
        let state = match rng.random_range(0..3) {
            0 => LightState::Red,
            1 => LightState::Yellow,
            _ => LightState::Green,
        };
        traffic_lights.push(TrafficLight {
            position: [round6(p[0]), round6(p[1]), 3.0],
            state,
            confidence: round6(uniform(&mut rng, 0.8, 1.0)),
        });
    }

    let av = &agents[0];
    let route = route_for(av);
    Segment {
        id,
        dt: config.sim_dt,
        agents,
        roadgraph: build_roadgraph(),
        traffic_lights,
        route,
    }
}

/// Coarse route: the AV's logged path resampled every 5 m and extended 60 m
/// past the last logged position along the final heading.
fn route_for(av: &LoggedAgent) -> Vec<Point> {
    let pl = Polyline::new(av.positions.clone());
    let mut out = Vec::new();
    let len = pl.length();
    let mut s = 0.0;
    while s < len {
        let p = pl.point_at(s);
        out.push([round6(p[0]), round6(p[1])]);
        s += 5.0;
    }
    let last = *av.positions.last().unwrap();
    let h = *av.headings.last().unwrap();
    for i in 0..=12 {
        let e = 5.0 * i as f64;
        out.push([round6(last[0] + e * h.cos()), round6(last[1] + e * h.sin())]);
    }
    out.dedup();
    out
}

/// Generates `config.num_segments` segments with ids `0..num_segments`.
pub fn generate_world(config: &WorldConfig) -> Result<Vec<Segment>, SynthError> {
    config.validate()?;
    Ok((0..config.num_segments as u64)
        .into_par_iter()
        .map(|id| generate_segment(config, id))
        .collect())
}

// ---------------------------------------------------------------------------
// Examples

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn invalid() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            heading: 0.0,
            vx: 0.0,
            vy: 0.0,
            length: 0.0,
            width: 0.0,
            height: 0.0,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub agent_id: u32,
    pub agent_type: AgentType,
    pub states: Vec<AgentState>,
}

impl AgentHistory {
    pub fn is_valid(&self) -> bool {
        self.states.iter().any(|s| s.valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolylineFeature {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub direction: [f64; 2],
    pub kind: RoadKind,
    pub valid: bool,
}

impl PolylineFeature {
    pub fn invalid() -> Self {
        Self {
            start: [0.0; 3],
            end: [0.0; 3],
            direction: [0.0; 2],
            kind: RoadKind::Lane,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightObservation {
    pub position: [f64; 3],
    pub state: LightState,
    pub confidence: f64,
    pub valid: bool,
}

/// Model input, in the AV frame at the current time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    /// `[S_a][T_history]` agent states.
    pub agents: Vec<AgentHistory>,
    /// `[S_r]` roadgraph segments.
    pub roadgraph: Vec<PolylineFeature>,
    /// `[S_tls][T_history]` traffic light observations.
    pub traffic_lights: Vec<Vec<LightObservation>>,
    /// `[S_route]` route segments; all invalid when no route is given.
    pub route: Vec<PolylineFeature>,
}

/// Tokenized future of one context agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTarget {
    /// Index into `SceneContext::agents`.
    pub slot: usize,
    pub agent_type: AgentType,
    /// Positions one token step before and at the current time.
    pub seed: [Point; 2],
    pub future: Vec<Point>,
    pub tokens: Vec<Token>,
    pub clamped_steps: usize,
    pub initial_speed: f64,
}

impl AgentTarget {
    pub fn future_meters(&self) -> f64 {
        let mut prev = self.seed[1];
        let mut acc = 0.0;
        for p in &self.future {
            acc += dist(prev, *p);
            prev = *p;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub segment_id: u64,
    pub window: u32,
    pub context: SceneContext,
    /// Futures of every valid context agent, in slot order.
    pub targets: Vec<AgentTarget>,
    /// Indices into `targets` of the modeled agents.
    pub modeled: Vec<usize>,
}

impl Example {
    pub fn modeled_targets(&self) -> impl Iterator<Item = &AgentTarget> {
        self.modeled.iter().map(move |&i| &self.targets[i])
    }

    /// Miles travelled by the modeled agents over the predicted horizon.
    pub fn miles(&self) -> f64 {
        self.modeled_targets()
            .map(AgentTarget::future_meters)
            .sum::<f64>()
            / METERS_PER_MILE
    }

    pub fn modeled_types(&self) -> Vec<AgentType> {
        self.modeled_targets().map(|t| t.agent_type).collect()
    }
}

/// Sliding-window parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history_seconds: f64,
    pub future_seconds: f64,
    pub stride_seconds: f64,
    pub include_av: bool,
    pub include_route: bool,
}

impl WindowSpec {
    pub fn from_config(c: &WorldConfig) -> Self {
        Self {
            history_seconds: c.history_seconds,
            future_seconds: c.future_seconds,
            stride_seconds: c.stride_seconds,
            include_av: true,
            include_route: false,
        }
    }

    pub fn window_count(&self, segment_seconds: f64) -> usize {
        let span = self.history_seconds + self.future_seconds;
        if segment_seconds + 1e-9 < span {
            return 0;
        }
        ((segment_seconds - span) / self.stride_seconds + 1e-9).floor() as usize + 1
    }
}

fn polyline_feature(a: Point, b: Point, kind: RoadKind, frame: &Frame) -> PolylineFeature {
    let (la, lb) = (frame.to_local(a), frame.to_local(b));
    let len = dist(la, lb).max(1e-9);
    PolylineFeature {
        start: [la[0], la[1], 0.0],
        end: [lb[0], lb[1], 0.0],
        direction: [(lb[0] - la[0]) / len, (lb[1] - la[1]) / len],
        kind,
        valid: true,
    }
}

/// Route segments ahead of `from` (nearest route point onward), at most `n`.
pub fn route_features(
    route: &[Point],
    from: Point,
    frame: &Frame,
    n: usize,
) -> Vec<PolylineFeature> {
    let mut out = Vec::with_capacity(n);
    if route.len() >= 2 && n > 0 {
        let start = route
            .iter()
            .enumerate()
            .min_by(|a, b| dist(*a.1, from).partial_cmp(&dist(*b.1, from)).unwrap())
            .map(|(i, _)| i)
            .unwrap()
            .min(route.len() - 2);
        // two 5 m route steps per feature
        let mut i = start;
        while out.len() < n && i + 1 < route.len() {
            let j = (i + 2).min(route.len() - 1);
            out.push(polyline_feature(route[i], route[j], RoadKind::Lane, frame));
            i = j;
        }
    }
    out.resize(n, PolylineFeature::invalid());
    out
}

/// Builds the scene context at sample index `current` from logged agents.
/// `agents[0]` must be the AV; its pose defines the frame.
pub fn build_context(
    agents: &[&LoggedAgent],
    roadgraph: &[RoadSegment],
    lights: &[TrafficLight],
    route: Option<&[Point]>,
    current: usize,
    dt: f64,
    history_seconds: f64,
    token_dt: f64,
    slots: &SceneSlots,
) -> (SceneContext, Frame, Vec<usize>) {
    let av = agents[0];
    let frame = Frame {
        origin: av.positions[current],
        heading: av.headings[current],
    };
    let step = (token_dt / dt).round() as usize;
    let hist_len = (history_seconds / token_dt).round() as usize + 1;
    let mut order: Vec<usize> = (0..agents.len()).collect();
    // AV first, then by distance; ties by id
    order.sort_by(|&a, &b| {
        let key = |i: usize| {
            if i == 0 {
                -1.0
            } else {
                dist(agents[i].positions[current], frame.origin)
            }
        };
        key(a)
            .partial_cmp(&key(b))
            .unwrap()
            .then(agents[a].id.cmp(&agents[b].id))
    });
    order.truncate(slots.agents);
    let mut histories = Vec::with_capacity(slots.agents);
    for &i in &order {
        let a = agents[i];
        let mut states = Vec::with_capacity(hist_len);
        for j in 0..hist_len {
            let back = (hist_len - 1 - j) * step;
            if back > current || !a.valid[current - back] {
                states.push(AgentState::invalid());
                continue;
            }
            let k = current - back;
            let p = frame.to_local(a.positions[k]);
            let h = frame.heading_to_local(a.headings[k]);
            states.push(AgentState {
                x: p[0],
                y: p[1],
                z: 0.0,
                heading: h,
                vx: a.speeds[k] * h.cos(),
                vy: a.speeds[k] * h.sin(),
                length: a.length,
                width: a.width,
                height: a.height,
                valid: true,
            });
        }
        histories.push(AgentHistory {
            agent_id: a.id,
            agent_type: a.agent_type,
            states,
        });
    }
    while histories.len() < slots.agents {
        histories.push(AgentHistory {
            agent_id: u32::MAX,
            agent_type: AgentType::Vehicle,
            states: vec![AgentState::invalid(); hist_len],
        });
    }

    let mut road: Vec<(f64, PolylineFeature)> = roadgraph
        .iter()
        .map(|r| {
            let mid = [0.5 * (r.start[0] + r.end[0]), 0.5 * (r.start[1] + r.end[1])];
            (
                dist(mid, frame.origin),
                polyline_feature(
                    [r.start[0], r.start[1]],
                    [r.end[0], r.end[1]],
                    r.kind,
                    &frame,
                ),
            )
        })
        .collect();
    road.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut roadgraph_feats: Vec<PolylineFeature> = road
        .into_iter()
        .take(slots.roadgraph)
        .map(|x| x.1)
        .collect();
    roadgraph_feats.resize(slots.roadgraph, PolylineFeature::invalid());

    let mut light_order: Vec<&TrafficLight> = lights.iter().collect();
    light_order.sort_by(|a, b| {
        dist([a.position[0], a.position[1]], frame.origin)
            .partial_cmp(&dist([b.position[0], b.position[1]], frame.origin))
            .unwrap()
    });
    let mut light_feats = Vec::with_capacity(slots.traffic_lights);
    for l in light_order.into_iter().take(slots.traffic_lights) {
        let p = frame.to_local([l.position[0], l.position[1]]);
        let obs = LightObservation {
            position: [p[0], p[1], l.position[2]],
            state: l.state,
            confidence: l.confidence,
            valid: true,
        };
        light_feats.push(vec![obs; hist_len]);
    }
    while light_feats.len() < slots.traffic_lights {
        light_feats.push(vec![
            LightObservation {
                position: [0.0; 3],
                state: LightState::Red,
                confidence: 0.0,
                valid: false,
            };
            hist_len
        ]);
    }

    let route_feats = match route {
        Some(r) => route_features(r, frame.origin, &frame, slots.route),
        None => vec![PolylineFeature::invalid(); slots.route],
    };

    (
        SceneContext {
            agents: histories,
            roadgraph: roadgraph_feats,
            traffic_lights: light_feats,
            route: route_feats,
        },
        frame,
        order,
    )
}

/// Slices a segment into examples with the given window and tokenizes the
/// futures of every context agent that is valid across the window.
pub fn window_examples(
    segment: &Segment,
    spec: &WindowSpec,
    vocab: &TokenVocab,
    slots: &SceneSlots,
    modeled_agents: usize,
) -> Result<Vec<Example>, SynthError> {
    vocab.validate()?;
    let need = spec.history_seconds + spec.future_seconds;
    let have = segment.duration();
    if have + 1e-9 < need {
        return Err(SynthError::SegmentTooShort { have, need });
    }
    let dt = segment.dt;
    let step = (vocab.token_dt / dt).round() as usize;
    let hist = (spec.history_seconds / dt).round() as usize;
    let stride = (spec.stride_seconds / dt).round() as usize;
    let fut_tokens = (spec.future_seconds / vocab.token_dt).round() as usize;
    let windows = spec.window_count(have);
    let agent_refs: Vec<&LoggedAgent> = segment.agents.iter().collect();
    let mut out = Vec::with_capacity(windows);
    for w in 0..windows {
        let current = hist + w * stride;
        let (context, frame, order) = build_context(
            &agent_refs,
            &segment.roadgraph,
            &segment.traffic_lights,
            spec.include_route.then_some(segment.route.as_slice()),
            current,
            dt,
            spec.history_seconds,
            vocab.token_dt,
            slots,
        );
        let mut targets = Vec::new();
        for (slot, &ai) in order.iter().enumerate() {
            let a = agent_refs[ai];
            let idx: Vec<usize> = (0..fut_tokens + 2)
                .map(|j| current - step + j * step)
                .collect();
            if idx.iter().any(|&k| !a.valid[k]) {
                continue;
            }
            let pts: Vec<Point> = idx
                .iter()
                .map(|&k| frame.to_local(a.positions[k]))
                .collect();
            let enc = codec::encode(&AgentTrack::new(pts.clone()), vocab)?;
            targets.push(AgentTarget {
                slot,
                agent_type: a.agent_type,
                seed: [pts[0], pts[1]],
                future: pts[2..].to_vec(),
                tokens: enc.tokens,
                clamped_steps: enc.clamped_steps,
                initial_speed: a.speeds[current],
            });
        }
        let modeled = select_modeled(&targets, modeled_agents, spec.include_av);
        out.push(Example {
            segment_id: segment.id,
            window: w as u32,
            context,
            targets,
            modeled,
        });
    }
    Ok(out)
}

fn select_modeled(targets: &[AgentTarget], m: usize, include_av: bool) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .filter(|(_, t)| include_av || t.agent_type != AgentType::Av)
        .map(|(i, _)| i)
        .take(m)
        .collect()
}

/// Examples for a whole world; segments are processed in id order.
pub fn build_dataset(
    config: &WorldConfig,
    vocab: &TokenVocab,
    spec: &WindowSpec,
) -> Result<Vec<Example>, SynthError> {
    config.validate()?;
    let per_segment: Vec<Result<Vec<Example>, SynthError>> = (0..config.num_segments as u64)
        .into_par_iter()
        .map(|id| {
            let seg = generate_segment(config, id);
            window_examples(&seg, spec, vocab, &config.slots, config.modeled_agents)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_segment {
        out.extend(
            r?.into_iter()
                .filter(|e| e.modeled.len() == config.modeled_agents),
        );
    }
    Ok(out)
}

/// Outcome of [`exclude_agent`].
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub examples: Vec<Example>,
    pub dropped: usize,
}

/// Removes `agent_type` from the modeled slots, refilling from the next
/// eligible context agents. Examples that cannot fill `m` slots are dropped.
pub fn exclude_agent(dataset: Vec<Example>, agent_type: AgentType, m: usize) -> Filtered {
    let mut dropped = 0;
    let mut examples = Vec::with_capacity(dataset.len());
    for mut ex in dataset {
        if ex.modeled_targets().all(|t| t.agent_type != agent_type) && ex.modeled.len() == m {
            examples.push(ex);
            continue;
        }
        let modeled: Vec<usize> = ex
            .targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.agent_type != agent_type)
            .map(|(i, _)| i)
            .take(m)
            .collect();
        if modeled.len() < m {
            dropped += 1;
            continue;
        }
        ex.modeled = modeled;
        examples.push(ex);
    }
    Filtered { examples, dropped }
}

/// Total modeled-agent miles of a dataset.
pub fn dataset_miles(examples: &[Example]) -> f64 {
    examples.iter().map(Example::miles).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            num_segments: 4,
            ..WorldConfig::toy()
        }
    }

    #[test]
    fn segments_are_deterministic() {
        let c = small();
        let a = generate_segment(&c, 3);
        let b = generate_segment(&c, 3);
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_ne!(a, generate_segment(&c, 4));
    }

    #[test]
    fn straight_only_world_has_small_heading_changes() {
        let c = WorldConfig {
            mixture: MixtureWeights::only_straight(),
            ..small()
        };
        for id in 0..6 {
            let seg = generate_segment(&c, id);
            for a in seg
                .agents
                .iter()
                .filter(|a| a.agent_type != AgentType::Pedestrian)
            {
                let h0 = a.headings[0];
                for h in &a.headings {
                    assert!(wrap_angle(h - h0).abs() < 15f64.to_radians());
                }
            }
        }
    }

    #[test]
    fn accelerations_are_bounded() {
        let c = WorldConfig {
            num_segments: 8,
            agents_per_scene: 12,
            ..WorldConfig::toy()
        };
        for id in 0..8 {
            let seg = generate_segment(&c, id);
            for a in &seg.agents {
                for k in 1..a.positions.len() - 1 {
                    let (p0, p1, p2) = (a.positions[k - 1], a.positions[k], a.positions[k + 1]);
                    let ax = (p2[0] - 2.0 * p1[0] + p0[0]) / (c.sim_dt * c.sim_dt);
                    let ay = (p2[1] - 2.0 * p1[1] + p0[1]) / (c.sim_dt * c.sim_dt);
                    let acc = ax.hypot(ay);
                    assert!(
                        acc <= c.max_accel + 0.05,
                        "segment {id} agent {} ({:?}) step {k}: {acc}",
                        a.id,
                        a.behavior
                    );
                }
            }
        }
    }

    #[test]
    fn logged_agents_never_overlap() {
        let c = small();
        let seg = generate_segment(&c, 1);
        for i in 0..seg.agents.len() {
            for j in i + 1..seg.agents.len() {
                for k in 0..seg.agents[i].positions.len() {
                    assert!(!seg.agents[i].obb(k).overlaps(&seg.agents[j].obb(k)));
                }
            }
        }
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec::from_config(&WorldConfig::default());
        assert_eq!(spec.window_count(30.0), 10);
        assert_eq!(spec.window_count(16.0), 1);
        assert_eq!(spec.window_count(15.9), 0);
        let c = WorldConfig::toy();
        let vocab = TokenVocab::default();
        let seg = generate_segment_with_duration(&c, 0, 16.0);
        assert_eq!(
            window_examples(&seg, &spec, &vocab, &c.slots, 4)
                .unwrap()
                .len(),
            1
        );
        let seg = generate_segment_with_duration(&c, 0, 10.0);
        assert!(matches!(
            window_examples(&seg, &spec, &vocab, &c.slots, 4),
            Err(SynthError::SegmentTooShort { .. })
        ));
    }

    #[test]
    fn thirty_second_segment_gives_ten_overlapping_windows() {
        let c = small();
        let vocab = TokenVocab::default();
        let seg = generate_segment(&c, 0);
        let ex = window_examples(&seg, &WindowSpec::from_config(&c), &vocab, &c.slots, 4).unwrap();
        assert_eq!(ex.len(), 10);
        // consecutive windows: 16 s spans shifted by 1.5 s overlap by 14.5 s
        let span = c.history_seconds + c.future_seconds;
        assert!((span - c.stride_seconds - 14.5).abs() < 1e-12);
        for e in &ex {
            assert_eq!(e.modeled.len(), 4);
            assert_eq!(e.context.agents.len(), c.slots.agents);
            assert_eq!(e.context.agents[0].agent_type, AgentType::Av);
            for t in &e.targets {
                assert_eq!(t.tokens.len(), 22);
            }
        }
    }

    #[test]
    fn tokenized_targets_round_trip() {
        let c = small();
        let vocab = TokenVocab::default();
        let seg = generate_segment(&c, 2);
        let ex = window_examples(&seg, &WindowSpec::from_config(&c), &vocab, &c.slots, 4).unwrap();
        for e in &ex {
            for t in &e.targets {
                let dec = codec::decode_future(&t.tokens, t.seed, &vocab).unwrap();
                let bound = t.tokens.len() as f64 * vocab.half_bin() + 1e-9;
                if t.clamped_steps == 0 {
                    for (a, b) in dec.iter().zip(&t.future) {
                        assert!((a[0] - b[0]).abs() <= bound && (a[1] - b[1]).abs() <= bound);
                    }
                }
            }
        }
    }

    #[test]
    fn type_counts_follow_mixture() {
        let c = WorldConfig {
            num_segments: 40,
            ..WorldConfig::toy()
        };
        let segs = generate_world(&c).unwrap();
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for s in &segs {
            for a in s.agents.iter().skip(1) {
                counts[a.agent_type.index()] += 1;
                total += 1;
            }
        }
        for (ty, p) in c.mixture.type_fractions() {
            let n = total as f64;
            let sigma = (n * p * (1.0 - p)).sqrt();
            let got = counts[ty.index()] as f64;
            assert!(
                (got - n * p).abs() <= 3.0 * sigma,
                "{ty:?}: {got} vs {}",
                n * p
            );
        }
    }

    #[test]
    fn exclude_av_refills_and_counts_drops() {
        let c = small();
        let vocab = TokenVocab::default();
        let spec = WindowSpec::from_config(&c);
        let data = build_dataset(&c, &vocab, &spec).unwrap();
        let n = data.len();
        // brute-force scan for scenes lacking enough non-AV agents
        let expected_drops = data
            .iter()
            .filter(|e| {
                e.targets
                    .iter()
                    .filter(|t| t.agent_type != AgentType::Av)
                    .count()
                    < 4
            })
            .count();
        let f = exclude_agent(data, AgentType::Av, 4);
        assert_eq!(f.dropped, expected_drops);
        assert_eq!(f.examples.len() + f.dropped, n);
        for e in &f.examples {
            assert!(e.modeled_targets().all(|t| t.agent_type != AgentType::Av));
            assert_eq!(e.context.agents[0].agent_type, AgentType::Av);
        }
        // already AV-free data passes through unchanged
        let again = exclude_agent(f.examples.clone(), AgentType::Av, 4);
        assert_eq!(again.examples, f.examples);
        assert_eq!(again.dropped, 0);
    }

    #[test]
    fn exclude_drops_scenes_with_too_few_agents() {
        let c = WorldConfig {
            agents_per_scene: 4,
            modeled_agents: 4,
            ..small()
        };
        let vocab = TokenVocab::default();
        let data = build_dataset(&c, &vocab, &WindowSpec::from_config(&c)).unwrap();
        let n = data.len();
        let f = exclude_agent(data, AgentType::Av, 4);
        assert_eq!(f.dropped, n);
    }

    #[test]
    fn config_validation() {
        let mut c = WorldConfig::default();
        c.mixture.straight += 0.5;
        assert!(c.validate().is_err());
        let c = WorldConfig {
            modeled_agents: 20,
            ..WorldConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
