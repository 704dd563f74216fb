use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use range_slam::grid::{
    bresenham_cells, filter_binary, majority_stage, raycast, Cell, CellState, FilterParams, GridGeometry, HitParams,
    OccupancyGrid, TriMap,
};
use range_slam::localizer::{
    map_weight, solve, AgentState, Anchor, AnchorConfig, LmSettings, Objective, ObjectiveWeights, RangeObservation,
};
use range_slam::metrics::{ate_rmse, map_metrics, CellPolicy, ConfusionCounts, TimedPoint};
use range_slam::sensor::{
    denormalize, normalize_channels, smooth, ChannelStats, Channels, FrameOutcome, SensorParams, SensorPipeline,
    SlidingWindow, SmoothingWeights, UwbFrame,
};
use range_slam::sim::{self, degrade_labels, synthesize_range, NoiseParams, Scenario};
use range_slam::svm::{classify, score_to_weight, train, Kernel, Label, LabeledSample};

fn channels() -> impl Strategy<Value = Channels> {
    (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(a, b, c)| Channels::new(a, b, c))
}

fn stats() -> impl Strategy<Value = ChannelStats> {
    (prop::array::uniform3(-100.0..100.0f64), prop::array::uniform3(0.01..50.0f64))
        .prop_map(|(mu, sigma)| ChannelStats::new(mu, sigma).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalization_round_trips(x in channels(), s in stats()) {
        let back = denormalize(normalize_channels(x, &s), &s);
        for c in 0..3 {
            prop_assert!((back.0[c] - x.0[c]).abs() <= 1e-12 * (1.0 + x.0[c].abs() + s.mu[c].abs()));
        }
    }

    #[test]
    fn window_is_bounded_and_stats_match_recount(cap in 1usize..30, xs in prop::collection::vec(channels(), 0..60)) {
        let mut w = SlidingWindow::new(cap).unwrap();
        for x in &xs {
            w.push(*x);
            prop_assert!(w.len() <= cap);
        }
        let kept: Vec<&Channels> = xs.iter().rev().take(cap).rev().collect();
        prop_assert_eq!(w.entries().copied().collect::<Vec<_>>(), kept.iter().map(|c| **c).collect::<Vec<_>>());
        if kept.len() >= 2 {
            let n = kept.len() as f64;
            for c in 0..3 {
                let mean = kept.iter().map(|e| e.0[c]).sum::<f64>() / n;
                let var = kept.iter().map(|e| (e.0[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                prop_assert!((w.mean()[c] - mean).abs() < 1e-9);
                prop_assert!((w.std_dev()[c] - var.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn geometric_weights_are_valid(n in 1usize..20, ratio in 0.05..0.95f64) {
        let w = SmoothingWeights::geometric(n, ratio).unwrap();
        let k = w.as_slice();
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(k.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn smoothing_is_a_convex_combination(xs in prop::collection::vec(channels(), 5..25), ratio in 0.1..0.9f64) {
        let mut w = SlidingWindow::new(20).unwrap();
        for x in &xs {
            w.push(*x);
        }
        let out = smooth(&w, &SmoothingWeights::geometric(5, ratio).unwrap()).unwrap();
        for c in 0..3 {
            let lo = w.entries().map(|e| e.0[c]).fold(f64::INFINITY, f64::min);
            let hi = w.entries().map(|e| e.0[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.0[c] >= lo - 1e-12 && out.0[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn rejection_leaves_window_untouched(
        ds in prop::collection::vec(prop_oneof![4 => 4.9..5.1f64, 1 => 9.0..12.0f64], 1..80),
    ) {
        let mut pipe = SensorPipeline::new(ChannelStats::identity(), SensorParams::default()).unwrap();
        let mut outputs = Vec::new();
        for (k, d) in ds.iter().enumerate() {
            let frame = UwbFrame { anchor_id: 7, timestamp: k as f64 * 0.02, d: *d, rx: -60.0 + d, fp: -62.0 + d };
            let before: Vec<Channels> = pipe.window(7).map(|w| w.entries().copied().collect()).unwrap_or_default();
            let outcome = pipe.process(&frame);
            let after: Vec<Channels> = pipe.window(7).unwrap().entries().copied().collect();
            prop_assert!(after.len() <= 20);
            if outcome == FrameOutcome::Rejected {
                prop_assert_eq!(before, after);
            }
            outputs.push(outcome);
        }
        let mut again = SensorPipeline::new(ChannelStats::identity(), SensorParams::default()).unwrap();
        for (k, d) in ds.iter().enumerate() {
            let frame = UwbFrame { anchor_id: 7, timestamp: k as f64 * 0.02, d: *d, rx: -60.0 + d, fp: -62.0 + d };
            prop_assert_eq!(again.process(&frame), outputs[k]);
        }
    }
}

fn labeled_blobs(seed: u64, n: usize) -> Vec<LabeledSample> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let los = k % 2 == 0;
            let c = if los { 0.6 } else { -0.6 };
            let f = [
                c + rng.gen_range(-1.0..1.0),
                c + rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            LabeledSample::new(f, Label::from_los(los))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_is_monotone_bounded_and_symmetric(a in -3.0..3.0f64, b in -3.0..3.0f64, lambda in 0.1..5.0f64) {
        let (wa, wb) = (score_to_weight(a, lambda), score_to_weight(b, lambda));
        prop_assert!(wa > 0.0 && wa < 1.0);
        if a < b {
            prop_assert!(wa < wb);
        }
        prop_assert!((score_to_weight(-a, lambda) - (1.0 - wa)).abs() < 1e-12);
    }

    #[test]
    fn trained_model_beats_zero_vector(seed in 0u64..1000, c in 0.1..10.0f64, gaussian in any::<bool>()) {
        let samples = labeled_blobs(seed, 40);
        let kernel = if gaussian { Kernel::Gaussian { gamma: 0.5 } } else { Kernel::Linear };
        let model = train(&samples, kernel, c).unwrap();
        prop_assert!(model.hinge_objective(&samples) <= c * samples.len() as f64 + 1e-9);
        for s in &samples {
            prop_assert_eq!(classify(&model, &s.x).unwrap(), classify(&model, &s.x).unwrap());
        }
    }

    #[test]
    fn linear_labels_survive_positive_scaling(seed in 0u64..1000, scale in 0.01..100.0f64) {
        let samples = labeled_blobs(seed, 30);
        let model = train(&samples, Kernel::Linear, 1.0).unwrap();
        for s in &samples {
            let scaled: Vec<f64> = s.x.iter().map(|v| v * scale).collect();
            let (a, b) = (classify(&model, &s.x).unwrap(), classify(&model, &scaled).unwrap());
            prop_assert!((b.score - scale * a.score).abs() <= 1e-9 * (1.0 + b.score.abs()));
            if a.score.abs() > 1e-9 {
                prop_assert_eq!(a.label, b.label);
            }
        }
    }
}

fn geometry() -> GridGeometry {
    GridGeometry::new([-2.0, 1.0], 0.5, 20, 20).unwrap()
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    (-2.0..7.999f64, 1.0..10.999f64).prop_map(|(x, y)| [x, y])
}

fn tri_map(g: GridGeometry) -> impl Strategy<Value = TriMap> {
    prop::collection::vec(
        prop_oneof![Just(CellState::Occupied), Just(CellState::Free), Just(CellState::Unexplored)],
        g.len(),
    )
    .prop_map(move |cells| TriMap { geometry: g, cells })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn raycast_is_symmetric_and_connected(a in point(), b in point()) {
        let g = geometry();
        let ab = raycast(&g, a, b).unwrap();
        let mut ba = raycast(&g, b, a).unwrap().cells;
        ba.reverse();
        prop_assert_eq!(&ab.cells, &ba);
        prop_assert_eq!(ab.cells[0], g.cell_of(a[0], a[1]).unwrap());
        prop_assert_eq!(*ab.cells.last().unwrap(), g.cell_of(b[0], b[1]).unwrap());
        for w in ab.cells.windows(2) {
            let (dx, dy) = (w[0].ix.abs_diff(w[1].ix), w[0].iy.abs_diff(w[1].iy));
            prop_assert!(dx <= 1 && dy <= 1 && dx + dy > 0);
        }
    }

    #[test]
    fn cell_center_round_trips(ix in 0usize..20, iy in 0usize..20) {
        let g = geometry();
        let c = g.center(Cell::new(ix, iy));
        prop_assert_eq!(g.cell_of(c[0], c[1]).unwrap(), Cell::new(ix, iy));
    }

    #[test]
    fn updates_stay_on_the_ray_and_clamped(
        rays in prop::collection::vec((point(), point(), any::<bool>()), 1..40),
        e_max in 0.3..3.0f64,
    ) {
        let g = geometry();
        let params = HitParams::default();
        let mut grid = OccupancyGrid::new(g, e_max).unwrap();
        for (a, b, los) in rays {
            let before = grid.evidence_slice().to_vec();
            let ray = raycast(&g, a, b).unwrap();
            if los { grid.update_los(&ray, &params) } else { grid.update_nlos(&ray, &params) }
            for (i, (x, y)) in before.iter().zip(grid.evidence_slice()).enumerate() {
                prop_assert!(y.abs() <= e_max);
                if x != y {
                    prop_assert!(ray.cells.contains(&g.cell_at(i)));
                }
                prop_assert_eq!(grid.state(g.cell_at(i)), CellState::from_evidence(*y));
            }
        }
    }

    #[test]
    fn majority_stage_is_idempotent(map in tri_map(geometry())) {
        let once = majority_stage(&map);
        prop_assert_eq!(majority_stage(&once), once);
    }

    #[test]
    fn filter_never_occupies_unexplored_cells(map in tri_map(geometry())) {
        let out = filter_binary(&map, &FilterParams::default());
        for (before, after) in map.cells.iter().zip(&out.cells) {
            if *before == CellState::Unexplored {
                prop_assert_ne!(*after, CellState::Occupied);
            }
        }
    }

    #[test]
    fn bresenham_visits_distinct_cells(ax in 0usize..50, ay in 0usize..50, bx in 0usize..50, by in 0usize..50) {
        let cells = bresenham_cells(Cell::new(ax, ay), Cell::new(bx, by));
        prop_assert_eq!(cells.len(), ax.abs_diff(bx).max(ay.abs_diff(by)) + 1);
    }
}

fn square_anchors() -> AnchorConfig {
    AnchorConfig::new(vec![
        Anchor { id: 1, position: [0.0, 0.0] },
        Anchor { id: 2, position: [10.0, 0.0] },
        Anchor { id: 3, position: [10.0, 10.0] },
        Anchor { id: 4, position: [0.0, 10.0] },
    ])
    .unwrap()
}

fn observations() -> impl Strategy<Value = Vec<RangeObservation>> {
    prop::collection::vec((1.0..14.0f64, 0.0..1.0f64, 0.0..1.0f64), 4).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(k, (range, beta, alpha))| RangeObservation {
                anchor_id: k as u32 + 1,
                range,
                beta,
                alpha,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solve_never_worsens_the_start(obs in observations(), x in 1.0..9.0f64, y in 1.0..9.0f64) {
        let prev = AgentState::at_rest(x, y, 0.0);
        let sol = solve(&obs, &prev, 0.02, &square_anchors(), &ObjectiveWeights::default(), &LmSettings::default()).unwrap();
        prop_assert!(sol.cost <= sol.initial_cost);
        let again = solve(&obs, &prev, 0.02, &square_anchors(), &ObjectiveWeights::default(), &LmSettings::default()).unwrap();
        prop_assert_eq!(sol, again);
    }

    #[test]
    fn position_invariant_to_range_weight_scale(
        truth in (2.0..8.0f64, 2.0..8.0f64),
        noise in prop::collection::vec(-0.2..0.2f64, 4),
        k in 0.1..10.0f64,
    ) {
        let anchors = square_anchors();
        let obs: Vec<RangeObservation> = anchors
            .iter()
            .zip(&noise)
            .map(|(a, n)| RangeObservation {
                anchor_id: a.id,
                range: ((truth.0 - a.position[0]).powi(2) + (truth.1 - a.position[1]).powi(2)).sqrt() + n,
                beta: 1.0,
                alpha: 1.0,
            })
            .collect();
        let prev = AgentState::at_rest(5.0, 5.0, 0.0);
        let base = ObjectiveWeights { rho: [1.0, 0.0, 0.5], ..ObjectiveWeights::default() };
        let scaled = ObjectiveWeights { rho: [k, 0.0, 0.5 * k], ..base };
        let a = solve(&obs, &prev, 0.02, &anchors, &base, &LmSettings::default()).unwrap();
        let b = solve(&obs, &prev, 0.02, &anchors, &scaled, &LmSettings::default()).unwrap();
        prop_assert!((a.state.p - b.state.p).norm() < 1e-6);
    }

    #[test]
    fn map_weight_falls_with_occupancy(
        occupied in prop::collection::vec(any::<bool>(), 20),
        extra in 0usize..20,
        zeta in 0.0..1.0f64,
    ) {
        let g = GridGeometry::new([0.0, 0.0], 1.0, 1, 20).unwrap();
        let mut map = TriMap::filled(g, CellState::Free);
        for (i, o) in occupied.iter().enumerate() {
            if *o {
                map.cells[i] = CellState::Occupied;
            }
        }
        let (from, to) = ([0.5, 0.5], [19.5, 0.5]);
        let before = map_weight(&map, from, to, zeta).unwrap();
        map.cells[extra] = CellState::Occupied;
        let after = map_weight(&map, from, to, zeta).unwrap();
        prop_assert!(after <= before);
        prop_assert!((0.0..=1.0).contains(&after));
    }

    #[test]
    fn objective_cost_is_half_squared_residuals(obs in observations(), x in prop::array::uniform4(-5.0..15.0f64)) {
        let prev = AgentState::at_rest(4.0, 6.0, 0.0);
        let o = Objective::new(&obs, &prev, 0.02, &square_anchors(), &ObjectiveWeights::default()).unwrap();
        let direct: f64 = o.residuals(x).iter().map(|r| r * r).sum::<f64>() / 2.0;
        prop_assert!((o.cost(x) - direct).abs() <= 1e-12 * (1.0 + direct));
    }
}

fn short_scenario(rate: f64, seed: u64) -> Scenario {
    let mut s = Scenario::central_obstacle(rate, seed);
    s.agents[0].laps = Some(0.25);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>(), rate in 0.5..1.0f64) {
        let s = short_scenario(rate, seed);
        prop_assert_eq!(sim::run(&s).unwrap(), sim::run(&s).unwrap());
    }

    #[test]
    fn los_truth_ignores_noise(seed in any::<u64>()) {
        let noisy = short_scenario(0.8, seed);
        let quiet = Scenario { noise: NoiseParams::noiseless(), ..noisy.clone() };
        let labels = |s: &Scenario| -> Vec<bool> {
            sim::run(s).unwrap().iter().flat_map(|f| f.measurements.iter().map(|m| m.true_los)).collect()
        };
        prop_assert_eq!(labels(&noisy), labels(&quiet));
    }

    #[test]
    fn nlos_ranges_dominate(seed in any::<u64>(), d in 1.0..20.0f64) {
        let noise = NoiseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut los: Vec<f64> = (0..400).map(|_| synthesize_range(d, true, &noise, &mut rng)).collect();
        let mut nlos: Vec<f64> = (0..400).map(|_| synthesize_range(d, false, &noise, &mut rng)).collect();
        los.sort_by(f64::total_cmp);
        nlos.sort_by(f64::total_cmp);
        // Empirical quantiles of the NLOS sample sit above the LOS ones away from the tails.
        for q in [100, 200, 300, 380] {
            prop_assert!(nlos[q] > los[q]);
        }
    }

    #[test]
    fn degradation_matches_rate(seed in any::<u64>(), rate in 0.0..1.0f64) {
        let n = 4000;
        let truth: Vec<bool> = (0..n).map(|k| k % 3 != 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let presented = degrade_labels(&truth, rate, &mut rng);
        let kept = truth.iter().zip(&presented).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let sd = (rate * (1.0 - rate) / n as f64).sqrt();
        prop_assert!((kept - rate).abs() <= 3.0 * sd + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f1_matches_precision_recall_form(tp in 1u64..10_000, tn in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let c = ConfusionCounts { tp, tn, fp, fn_ };
        let (p, r) = (c.precision(), c.recall());
        prop_assert!((c.f1() - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn ate_ignores_common_time_shift(
        pts in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -0.5..0.5f64, -0.5..0.5f64), 2..60),
        shift in -1000.0..1000.0f64,
    ) {
        let truth: Vec<TimedPoint> = pts.iter().enumerate().map(|(k, p)| TimedPoint { t: k as f64 * 0.02, x: p.0, y: p.1 }).collect();
        let est: Vec<TimedPoint> = pts.iter().zip(&truth).map(|(p, t)| TimedPoint { t: t.t, x: t.x + p.2, y: t.y + p.3 }).collect();
        let moved = |v: &[TimedPoint]| -> Vec<TimedPoint> { v.iter().map(|p| TimedPoint { t: p.t + shift, ..*p }).collect() };
        let a = ate_rmse(&est, &truth).unwrap();
        let b = ate_rmse(&moved(&est), &moved(&truth)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn confusion_total_counts_evaluated_cells(est in tri_map(geometry()), occupied in prop::collection::vec(any::<bool>(), 400)) {
        let g = geometry();
        let truth = TriMap {
            geometry: g,
            cells: occupied.iter().map(|&o| if o { CellState::Occupied } else { CellState::Free }).collect(),
        };
        let explored = est.cells.iter().filter(|c| c.is_explored()).count() as u64;
        let only = map_metrics(&est, &truth, CellPolicy::ExploredOnly).unwrap();
        let all = map_metrics(&est, &truth, CellPolicy::AllCells).unwrap();
        prop_assert_eq!(only.counts.total(), explored);
        prop_assert_eq!(all.counts.total(), g.len() as u64);
    }
}
