use std::f64::consts::PI;

use latentflow::autodiff::nn::softmax_attention;
use latentflow::autodiff::{Graph, Tensor};
use latentflow::eval::{l2_displacement, pdms, PdmsSubscores};
use latentflow::model::Model;
use latentflow::planner::{argmax_index, flatten_points, select_output, TrajectoryMode, TrajectorySet};
use latentflow::selection::{argmin_index, mode_criterion, stability_score, SelectionWeights};
use latentflow::sim::{
    check_collision, generate_episode, Command, Dataset, EgoState, ObstacleView, Observer, ObserverConfig, Point,
    ScenarioConfig, DT, HORIZON,
};
use latentflow::train::{sample_step, train, RunConfig, StepMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn observer() -> Observer {
    Observer::new(ObserverConfig::default())
}

fn scenario(i: usize) -> ScenarioConfig {
    [ScenarioConfig::mixed(), ScenarioConfig::lead_braking(), ScenarioConfig::empty()][i % 3].clone()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0..4.0f64, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn velocities() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5).prop_flat_map(|dim| prop::collection::vec(prop::collection::vec(-10.0..10.0f64, dim), 0..8))
}

/// Multiples of 1/8 in a small range, so shifts and power-of-two scalings
/// stay exact and cannot create ties.
fn dyadic() -> impl Strategy<Value = f64> {
    (-800i32..800).prop_map(|n| f64::from(n) / 8.0)
}

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn subscores() -> impl Strategy<Value = PdmsSubscores> {
    (unit(), unit(), unit(), unit(), unit()).prop_map(|(nc, dac, ep, ttc, comfort)| PdmsSubscores {
        nc,
        dac,
        ep,
        ttc,
        comfort,
    })
}

fn set_component(s: &mut PdmsSubscores, i: usize, v: f64) {
    match i {
        0 => s.nc = v,
        1 => s.dac = v,
        2 => s.ep = v,
        3 => s.ttc = v,
        _ => s.comfort = v,
    }
}

fn component(s: &PdmsSubscores, i: usize) -> f64 {
    [s.nc, s.dac, s.ep, s.ttc, s.comfort][i]
}

fn points() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64).prop_map(|(x, y)| [x, y]), HORIZON)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn attention_rows_are_distributions(
        (q, k, v) in (1usize..5, 1usize..6, 1usize..5, 1usize..4)
            .prop_flat_map(|(nq, nk, d, dv)| (matrix(nq, d), matrix(nk, d), matrix(nk, dv))),
        scale in 0.05..3.0f64,
    ) {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let (_, w) = softmax_attention(&mut g, q, k, v, scale).unwrap();
        let w = g.value(w);
        for r in 0..w.rows() {
            let row = w.row_slice(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn stability_lies_in_zero_to_pi(v in velocities()) {
        let slices: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        let s = stability_score(&slices);
        prop_assert!((0.0..=PI).contains(&s));
    }

    #[test]
    fn stability_ignores_positive_rescaling(
        v in velocities(),
        scales in prop::collection::vec(1e-3..1e3f64, 8),
    ) {
        let scaled: Vec<Vec<f64>> = v.iter().zip(&scales).map(|(x, c)| x.iter().map(|e| e * c).collect()).collect();
        let a: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        prop_assert!((stability_score(&a) - stability_score(&b)).abs() <= 1e-9);
    }

    #[test]
    fn repeated_direction_scores_zero(
        dir in prop::collection::vec(-5.0..5.0f64, 1..6),
        scales in prop::collection::vec(1e-3..1e3f64, 2..8),
    ) {
        prop_assume!(dir.iter().any(|x| *x != 0.0));
        let seq: Vec<Vec<f64>> = scales.iter().map(|c| dir.iter().map(|e| e * c).collect()).collect();
        let slices: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(stability_score(&slices), 0.0);
    }

    #[test]
    fn distinct_directions_score_positive(a in -PI..PI, turn in 1e-3..3.0f64) {
        let (u, w) = ([a.cos(), a.sin()], [(a + turn).cos(), (a + turn).sin()]);
        prop_assert!(stability_score(&[&u, &w]) > 0.0);
    }

    #[test]
    fn criterion_is_monotone_in_each_input(
        w in (0.0..3.0f64, 0.0..3.0f64, 0.0..3.0f64)
            .prop_filter("one positive weight", |w| w.0 + w.1 + w.2 > 0.0),
        base in (0.0..10.0f64, 0.0..10.0f64, 0.0..PI),
        bump in 0.0..5.0f64,
        which in 0usize..3,
    ) {
        let w = SelectionWeights::new(w.0, w.1, w.2).unwrap();
        let mut up = [base.0, base.1, base.2];
        up[which] += bump;
        let before = mode_criterion(base.0, base.1, base.2, &w).unwrap();
        let after = mode_criterion(up[0], up[1], up[2], &w).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn argmin_ignores_shift_and_positive_scaling(
        values in prop::collection::vec(dyadic(), 1..8),
        shift in dyadic(),
        exp in -4i32..5,
    ) {
        let best = argmin_index(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = values.iter().map(|v| v * 2f64.powi(exp)).collect();
        prop_assert_eq!(argmin_index(&shifted), best);
        prop_assert_eq!(argmin_index(&scaled), best);
    }

    #[test]
    fn argmax_ignores_logit_shift(
        logits in prop::collection::vec(dyadic(), 1..8),
        shift in dyadic(),
    ) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert_eq!(argmax_index(&shifted), argmax_index(&logits));
    }

    #[test]
    fn select_output_depends_only_on_the_set(
        logits in prop::collection::vec(-5.0..5.0f64, 1..8),
        wp in points(),
    ) {
        let set = TrajectorySet {
            modes: logits.iter().map(|&l| TrajectoryMode { waypoints: wp.clone(), score_logit: l }).collect(),
            command: Command::Straight,
            anchors: vec![wp.clone(); logits.len()],
        };
        let (i, m) = select_output(&set).unwrap();
        prop_assert_eq!(Some(i), argmax_index(&logits));
        prop_assert_eq!(m, &set.modes[i]);
        prop_assert_eq!(select_output(&set.clone()).unwrap().0, i);
    }

    #[test]
    fn pdms_is_monotone_in_each_subscore(s in subscores(), which in 0usize..5, to in unit()) {
        let mut up = s;
        set_component(&mut up, which, component(&s, which).max(to));
        prop_assert!(pdms(&up).unwrap() >= pdms(&s).unwrap());
        prop_assert!((0.0..=1.0).contains(&pdms(&s).unwrap()));
    }

    #[test]
    fn l2_at_three_seconds_is_the_mean_of_all_steps(pred in points(), gt in points()) {
        let h = l2_displacement(&pred, &gt).unwrap();
        let mut sum = 0.0;
        for (a, b) in pred.iter().zip(&gt) {
            sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        }
        prop_assert_eq!(h.h3, sum / HORIZON as f64);
        prop_assert!(h.h1 >= 0.0 && h.h2 >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn expert_never_collides(seed in 0u64..1_000_000, sc in 0usize..3) {
        let ep = generate_episode(seed, &scenario(sc), &observer()).unwrap();
        for t in ep.plannable_ticks() {
            prop_assert_eq!(check_collision(&ep.expert_trajectory[t], &ep, t).unwrap(), None);
        }
    }

    #[test]
    fn episodes_round_trip_bit_exactly(first in 0u64..1_000_000, sc in 0usize..3) {
        let data = Dataset::generate(first, 3, &scenario(sc), &observer()).unwrap();
        let text = data.to_jsonl().unwrap();
        let back = Dataset::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &data);
        prop_assert_eq!(back.to_jsonl().unwrap(), text);
    }

    #[test]
    fn moving_one_obstacle_respects_the_lipschitz_bound(
        ego in (-50.0..50.0f64, -5.0..5.0f64, -0.5..0.5f64, 0.0..15.0f64),
        obstacles in prop::collection::vec((-40.0..60.0f64, -8.0..8.0f64, -10.0..10.0f64, -3.0..3.0f64), 1..5),
        angle in -PI..PI,
        eps in 1e-4..0.5f64,
        cmd in 0usize..3,
    ) {
        let obs = observer();
        let ego = EgoState { x: ego.0, y: ego.1, heading: ego.2, speed: ego.3 };
        let ego_v = [ego.speed * ego.heading.cos(), ego.speed * ego.heading.sin()];
        let views: Vec<ObstacleView> = obstacles
            .iter()
            .map(|o| ObstacleView { position: [ego.x + o.0, o.1], velocity: [o.2, o.3] })
            .collect();
        let max_rel = views
            .iter()
            .map(|v| (v.velocity[0] - ego_v[0]).hypot(v.velocity[1] - ego_v[1]))
            .fold(0.0, f64::max);
        let mut moved = views.clone();
        moved[0].position[0] += eps * angle.cos();
        moved[0].position[1] += eps * angle.sin();
        let command = Command::ALL[cmd];
        let (a, b) = (obs.features(&ego, &views, command), obs.features(&ego, &moved, command));
        let delta = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(delta <= obs.lipschitz_bound(max_rel) * eps, "delta {delta} eps {eps}");
    }

    #[test]
    fn ego_moves_speed_times_dt_per_tick(seed in 0u64..1_000_000, sc in 0usize..3) {
        let ep = generate_episode(seed, &scenario(sc), &observer()).unwrap();
        for w in ep.ego.windows(2) {
            let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
            prop_assert!((d - w[1].speed * DT).abs() <= 1e-9);
        }
    }

    #[test]
    fn loss_total_is_the_weighted_sum_of_components(
        seed in 0u64..1000,
        ep_seed in 0u64..1000,
        tick in 0usize..100,
        convention in 0usize..2,
    ) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        if convention == 1 {
            cfg = cfg.with_overrides(&["flow.target_convention=\"path_derivative\""]).unwrap();
        }
        let model = Model::new(cfg.model(), seed).unwrap();
        let ep = generate_episode(ep_seed, &ScenarioConfig::mixed(), &observer()).unwrap();
        let ticks = ep.plannable_ticks();
        let t = ticks.start() + tick % (ticks.end() - ticks.start() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = sample_step(&model, &cfg, &ep, t, StepMode::Train, &mut rng).unwrap();
        prop_assert_eq!(out.losses.total, out.losses.weighted_sum(&cfg.loss));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn identical_seed_gives_identical_plans(seed in 0u64..1000, ep_seed in 0u64..1000) {
        let cfg = RunConfig::default();
        let ep = generate_episode(ep_seed, &ScenarioConfig::mixed(), &observer()).unwrap();
        let t = *ep.plannable_ticks().start();
        let (a, b) = (Model::new(cfg.model(), seed).unwrap(), Model::new(cfg.model(), seed).unwrap());
        let first = a.plan(ep.observe(t).unwrap(), ep.commands[t]).unwrap();
        prop_assert_eq!(&first, &b.plan(ep.observe(t).unwrap(), ep.commands[t]).unwrap());
        prop_assert_eq!(&first, &a.plan(ep.observe(t).unwrap(), ep.commands[t]).unwrap());
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn trained_flow_responds_to_the_trajectory_condition() {
    let cfg = RunConfig::default()
        .with_overrides(&["data.episodes=20", "train.epochs=2", "train.max_samples=48", "train.batch_size=8"])
        .unwrap();
    let data = Dataset::generate(cfg.data.first_seed, cfg.data.episodes, &ScenarioConfig::mixed(), &observer())
        .unwrap();
    let model = train(&cfg, &data).unwrap().model;
    let (planner, world, p) = (&model.planner, &model.world, &model.params);

    let ep = &data.episodes[0];
    let t = *ep.plannable_ticks().start();
    let features = ep.observe(t).unwrap();
    let set = model.plan(features, ep.commands[t]).unwrap();
    let (m0, m1) = (&set.modes[0].waypoints, &set.modes[1].waypoints);
    assert_ne!(m0, m1);

    let mut g = Graph::new();
    let scene = planner.encode_scene(&mut g, p, features).unwrap();
    let raw = g.constant(planner.observation_tensor(features).unwrap());
    let ex = world.extract(&mut g, p, raw, scene).unwrap();
    let mut runs = Vec::new();
    for wp in [m0, m1] {
        let wv = g.constant(Tensor::row(flatten_points(wp)));
        let h = world.condition(&mut g, p, ex.pooled, wv).unwrap();
        runs.push(world.rollout(&mut g, p, ex.z, h, world.steps()).unwrap());
    }
    let k = runs[0].velocities.len();
    let mean_cos = (0..k)
        .map(|i| cosine(g.value(runs[0].velocities[i]).data(), g.value(runs[1].velocities[i]).data()))
        .sum::<f64>()
        / k as f64;
    assert!(mean_cos < 1.0, "mean cosine {mean_cos}");
}

#[test]
fn ablation_reports_are_reproducible() {
    use latentflow::ablation::{run_ablation, SweepSpec};
    let base = RunConfig::default()
        .with_overrides(&["data.episodes=10", "train.epochs=1", "train.max_samples=6", "train.batch_size=3"])
        .unwrap();
    let data = Dataset::generate(base.data.first_seed, base.data.episodes, &ScenarioConfig::mixed(), &observer())
        .unwrap();
    let mut spec = SweepSpec::builtin("selection").unwrap();
    spec.seeds = vec![0, 1];
    let a = run_ablation(&base, &spec, &data, |_, _, _| {}).unwrap();
    let b = run_ablation(&base, &spec, &data, |_, _, _| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.to_csv(), b.to_csv());
}
