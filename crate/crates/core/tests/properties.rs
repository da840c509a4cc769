//! Invariants of the accounting, metrics, fitters and plan selection.

use drivescale_core::closed_loop::{plan_scores, progress, select_plan};
use drivescale_core::codec::Point;
use drivescale_core::eval::{
    aggregate, evaluate, AgentGroundTruth, BucketRules, ClusteredForecast, MissThresholds, Track,
};
use drivescale_core::fit::{fit_parabola, fit_power};
use drivescale_core::geometry::Obb;
use drivescale_core::ledger::{self, ModelShape};
use drivescale_core::synth::stream_rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn walk(rng: &mut ChaCha8Rng, start: Point, steps: usize, scale: f64) -> Track {
    let mut p = start;
    let mut v = [
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    ];
    (0..steps)
        .map(|_| {
            v[0] += rng.random_range(-0.3..0.3) * scale;
            v[1] += rng.random_range(-0.3..0.3) * scale;
            p = [p[0] + v[0], p[1] + v[1]];
            p
        })
        .collect()
}

fn random_instance(seed: u64, agents: usize) -> (Vec<ClusteredForecast>, Vec<AgentGroundTruth>) {
    let mut rng = stream_rng(seed, 0);
    let horizon = rng.random_range(1..12);
    let mut fs = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..agents {
        let current = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let gt = AgentGroundTruth {
            current,
            future: walk(&mut rng, current, horizon, 1.0),
            speed: rng.random_range(0.0..15.0),
            step_seconds: 0.5,
        };
        let k = rng.random_range(1..7);
        let trajectories: Vec<Track> = (0..k)
            .map(|_| walk(&mut rng, current, horizon, 1.0))
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        fs.push(
            ClusteredForecast::new(trajectories, raw.iter().map(|p| p / total).collect()).unwrap(),
        );
        gts.push(gt);
    }
    (fs, gts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parameter_count_formula(n in 0u64..8, m in 0u64..8, d in 1u64..1024, s in 1u64..256, q in 1u64..256) {
        let shape = ModelShape::new(n, m, d, s, q).unwrap();
        prop_assert_eq!(ledger::param_count(&shape).unwrap(), (12 * n + 16 * m) * d * d);
    }

    #[test]
    fn train_flops_linear_inference_affine(
        n in 0u64..6, m in 1u64..6, d in 1u64..256, s in 1u64..128, q in 1u64..128, e in 1u64..1000, k in 1u64..50,
    ) {
        let shape = ModelShape::new(n, m, d, s, q).unwrap();
        let t = |x| ledger::train_flops(&shape, x).unwrap();
        prop_assert_eq!(t(e * k), k * t(e));
        prop_assert_eq!(t(e + k), t(e) + t(k));
        let i = |x| ledger::inference_flops(&shape, x).unwrap();
        prop_assert_eq!(i(k + 2) - i(k + 1), i(k + 1) - i(k));
    }

    #[test]
    fn metric_ranges(seed in any::<u64>(), agents in 1usize..9) {
        let (fs, gts) = random_instance(seed, agents);
        let m = evaluate(&fs, &gts, &MissThresholds::default(), &BucketRules::default()).unwrap();
        prop_assert!(m.min_ade >= 0.0 && m.w_ade >= 0.0 && m.min_fde >= 0.0);
        prop_assert!(m.min_ade <= m.w_ade + 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.miss_rate));
        prop_assert!((0.0..=1.0).contains(&m.map));
    }

    #[test]
    fn aggregation_is_normalized_and_deterministic(seed in any::<u64>(), r in 1usize..40, k in 1usize..7) {
        let mut rng = stream_rng(seed, 1);
        let k = k.min(r);
        let rollouts: Vec<Track> = (0..r).map(|_| walk(&mut rng, [0.0, 0.0], 8, 1.0)).collect();
        let a = aggregate(&rollouts, k, 1.0).unwrap();
        prop_assert_eq!(a.trajectories.len(), k);
        prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(a, aggregate(&rollouts, k, 1.0).unwrap());
    }

    #[test]
    fn parabola_vertex_moves_with_x_scale(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = stream_rng(seed, 2);
        let z0 = rng.random_range(5.0..15.0);
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|i| {
                let z = z0 - 2.0 + 0.5 * i as f64;
                (z.exp(), 0.1 * (z - z0) * (z - z0) + 2.0 + rng.random_range(-0.01..0.01))
            })
            .collect();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x * shift.exp(), y)).collect();
        let a = fit_parabola(&pts).unwrap();
        let b = fit_parabola(&scaled).unwrap();
        prop_assert!((b.params[1] - a.params[1] - shift).abs() <= 1e-8 * (1.0 + a.params[1].abs()));
        prop_assert!((b.params[0] - a.params[0]).abs() <= 1e-8 * a.params[0].abs());
    }

    #[test]
    fn fits_ignore_input_order(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 3);
        let mut pts: Vec<(f64, f64)> = (0..10)
            .map(|i| {
                let x = 2f64.powi(i);
                (x, 3.0 * x.powf(-0.4) + 0.5 + rng.random_range(-0.01..0.01))
            })
            .collect();
        let pure = fit_power(&pts, false).unwrap();
        let with_c = fit_power(&pts, true).unwrap();
        let par = fit_parabola(&pts).ok();
        pts.shuffle(&mut rng);
        prop_assert_eq!(&pure, &fit_power(&pts, false).unwrap());
        prop_assert_eq!(&with_c, &fit_power(&pts, true).unwrap());
        prop_assert_eq!(par, fit_parabola(&pts).ok());
        // nested models: the constant can only help
        prop_assert!(with_c.ssr <= pure.ssr * (1.0 + 1e-9));
    }

    #[test]
    fn selection_is_translation_invariant(seed in any::<u64>(), r in 2usize..12, shift in prop::array::uniform2(-1e3f64..1e3)) {
        let mut rng = stream_rng(seed, 4);
        let route: Vec<Point> = (0..20).map(|i| [5.0 * i as f64, 0.3 * (i * i) as f64]).collect();
        let rollouts: Vec<Track> = (0..r).map(|_| walk(&mut rng, [1.0, 0.0], 10, 1.5)).collect();
        let alpha = rng.random_range(0.0..3.0);
        let moved: Vec<Track> = rollouts
            .iter()
            .map(|t| t.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect())
            .collect();
        let moved_route: Vec<Point> = route.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect();
        let mut scores = plan_scores(&rollouts, &route, alpha).unwrap();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // exact ties may break either way after rounding
        prop_assume!(scores[1] - scores[0] > 1e-9);
        prop_assert_eq!(select_plan(&rollouts, &route, alpha).unwrap(), select_plan(&moved, &moved_route, alpha).unwrap());
    }

    #[test]
    fn more_bias_never_less_progress(seed in any::<u64>(), r in 1usize..12, a1 in 0.0f64..5.0, da in 0.0f64..5.0) {
        let mut rng = stream_rng(seed, 5);
        let route: Vec<Point> = (0..20).map(|i| [5.0 * i as f64, 0.0]).collect();
        let rollouts: Vec<Track> = (0..r).map(|_| walk(&mut rng, [1.0, 0.0], 10, 1.5)).collect();
        let prog = |alpha: f64| {
            let i = select_plan(&rollouts, &route, alpha).unwrap();
            progress(&rollouts[i], &route).unwrap()
        };
        prop_assert!(prog(a1 + da) >= prog(a1) - 1e-9);
    }

    #[test]
    fn overlap_is_symmetric(
        a in (prop::array::uniform2(-10.0f64..10.0), -4.0f64..4.0, 0.1f64..6.0, 0.1f64..3.0),
        b in (prop::array::uniform2(-10.0f64..10.0), -4.0f64..4.0, 0.1f64..6.0, 0.1f64..3.0),
    ) {
        let mk = |(center, heading, length, width): ([f64; 2], f64, f64, f64)| Obb { center, heading, length, width };
        let (a, b) = (mk(a), mk(b));
        prop_assert_eq!(a.overlaps(&b), b.overlaps(&a));
    }
}
