//! Closed-loop adapter: a route-conditioned single-agent model as a planner.

use drivescale_core::closed_loop::{Policy, SimState};
use drivescale_core::codec::Point;
use drivescale_core::geometry::Polyline;
use drivescale_core::synth::{self, LoggedAgent};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::JointModel;
use crate::sample::{sample_rollouts, ModeledAgent, SampleSpec};
use crate::ModelError;

/// Spacing of the route points fed to the encoder, matching the training
/// routes.
const ROUTE_SPACING: f64 = 5.0;

pub struct ModelPolicy<'m> {
    pub model: &'m JointModel,
    pub temperature: f64,
}

impl ModelPolicy<'_> {
    /// Plans in world coordinates, one per sample.
    pub fn plan(
        &self,
        s: &SimState<'_>,
        count: usize,
        seed: u64,
    ) -> Result<Vec<Vec<Point>>, ModelError> {
        let scn = s.scenario;
        let cfg = self.model.config();
        let token_dt = cfg.vocab.token_dt;
        let mut agents: Vec<&LoggedAgent> = vec![s.av];
        agents.extend(scn.agents.iter().skip(1));
        let route = resample(&scn.route, ROUTE_SPACING);
        let (ctx, frame, _) = synth::build_context(
            &agents,
            &scn.roadgraph,
            &scn.traffic_lights,
            Some(&route),
            s.index,
            scn.dt,
            (cfg.history_steps - 1) as f64 * token_dt,
            token_dt,
            &cfg.slots,
        );
        let av = ModeledAgent::from_history(&ctx, 0, token_dt)
            .ok_or_else(|| ModelError::Shape("AV history is invalid".into()))?;
        let spec = SampleSpec {
            count,
            temperature: self.temperature,
            seed,
            steps: None,
        };
        Ok(sample_rollouts(self.model, &ctx, &[av], &spec)?
            .into_iter()
            .map(|r| r.decoded[0].iter().map(|p| frame.to_world(*p)).collect())
            .collect())
    }
}

impl Policy for ModelPolicy<'_> {
    fn plan_dt(&self) -> f64 {
        self.model.config().vocab.token_dt
    }

    /// A model error yields no plans, which the simulator reports as an
    /// aborted run.
    fn rollouts(&self, s: &SimState<'_>, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Point>> {
        self.plan(s, count, rng.random()).unwrap_or_default()
    }
}

fn resample(points: &[Point], spacing: f64) -> Vec<Point> {
    let pl = Polyline::new(points.to_vec());
    let n = (pl.length() / spacing).floor() as usize;
    let mut out: Vec<Point> = (0..=n).map(|i| pl.point_at(i as f64 * spacing)).collect();
    if pl.length() - n as f64 * spacing > 1e-9 {
        out.push(*points.last().unwrap());
    }
    out
}
