//! Central-difference gradient oracle shared by the gradient tests and the
//! acceptance runner.
#![allow(dead_code)]

use latentflow::autodiff::nn::{Attention, AttentionBlock, Linear, Mlp};
use latentflow::autodiff::{Graph, ParamStore, Tensor, Var};
use latentflow::flow::{seeded_noise, FlowConfig, TargetConvention, VelocityNet, WorldModel, WorldModelKind};
use latentflow::planner::{Planner, PlannerConfig};
use latentflow::sim::Command;
use latentflow::train::{reconstruction_loss, score_loss, total_loss, trajectory_loss, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Smallest relative-error denominator, so gradients below it are held to
/// an absolute error of `TOLERANCE·FLOOR = 1e-8`. Central differences at
/// this step carry up to ~1e-9 of round-off, which shows on gradients that
/// vanish exactly (key biases under softmax shift invariance).
pub const FLOOR: f64 = 1e-4;
/// Coordinates probed per parameter tensor.
const COORDS: usize = 4;
pub const SEEDS_PER_BLOCK: u64 = 10;

#[derive(Clone, Debug)]
pub struct Probe {
    pub block: &'static str,
    pub seed: u64,
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl Probe {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= TOLERANCE
    }
}

fn eval(store: &ParamStore, loss: &dyn Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    g.value(l).item()
}

/// Compares analytic gradients of the scalar `loss` with central
/// differences at random coordinates of every tensor in `store`. Inputs are
/// stored as parameters so their gradients are checked the same way.
pub fn check(
    block: &'static str,
    seed: u64,
    store: &mut ParamStore,
    loss: &dyn Fn(&mut Graph, &ParamStore) -> Var,
) -> Probe {
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    g.backward(l).expect("backward");
    let grads = g.param_grads(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00fd_00fd);
    let mut probe = Probe {
        block,
        seed,
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= COORDS {
            (0..n).collect()
        } else {
            (0..COORDS).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let analytic = grads.get(id).map_or(0.0, |gr| gr[i]);
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let fp = eval(store, loss);
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let fm = eval(store, loss);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            probe.checked += 1;
            if rel > probe.max_rel || !rel.is_finite() {
                probe.max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                probe.worst = format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", store.name(id));
            }
        }
    }
    probe
}

/// `Σ out ⊙ W` with a fixed random `W`, so every output entry matters.
pub fn readout(g: &mut Graph, out: Var, seed: u64) -> Var {
    let v = g.value(out);
    let w = g.constant(seeded_noise(v.rows(), v.cols(), seed));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn input(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) -> latentflow::autodiff::ParamId {
    store.add(name, seeded_noise(rows, cols, seed))
}

fn small_flow(kind: WorldModelKind, conv: TargetConvention, k: usize) -> FlowConfig {
    FlowConfig {
        kind,
        k,
        target_convention: conv,
        d_traj: 6,
        width: 8,
        depth: 2,
        time_dim: 4,
        ..FlowConfig::default()
    }
}

fn block_case(block: &'static str, seed: u64) -> Probe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let r = seed.wrapping_mul(7919);
    match block {
        "linear" => {
            let lin = Linear::new(&mut s, "lin", 5, 4, &mut rng);
            let x = input(&mut s, "x", 3, 5, r);
            check(block, seed, &mut s, &|g, p| {
                let xv = g.param(p, x);
                let y = lin.forward(g, p, xv).unwrap();
                readout(g, y, r + 1)
            })
        }
        "mlp" => {
            let mlp = Mlp::new(&mut s, "mlp", (5, 7, 3), &mut rng);
            let x = input(&mut s, "x", 3, 5, r);
            check(block, seed, &mut s, &|g, p| {
                let xv = g.param(p, x);
                let y = mlp.forward(g, p, xv).unwrap();
                readout(g, y, r + 1)
            })
        }
        "attention" => {
            let att = Attention::new(&mut s, "att", 4, 6, 5, &mut rng);
            let q = input(&mut s, "q", 3, 4, r);
            let c = input(&mut s, "ctx", 2, 6, r + 1);
            check(block, seed, &mut s, &|g, p| {
                let (qv, cv) = (g.param(p, q), g.param(p, c));
                let y = att.forward(g, p, qv, cv).unwrap();
                readout(g, y, r + 2)
            })
        }
        "attention_block" => {
            let blk = AttentionBlock::new(&mut s, "blk", 6, 6, &mut rng);
            let x = input(&mut s, "x", 3, 6, r);
            let c = input(&mut s, "ctx", 4, 6, r + 1);
            check(block, seed, &mut s, &|g, p| {
                let (xv, cv) = (g.param(p, x), g.param(p, c));
                let y = blk.forward(g, p, xv, cv).unwrap();
                readout(g, y, r + 2)
            })
        }
        "velocity_net" => {
            let net = VelocityNet::new(&mut s, "vel", 3, 6, 5, 8, 2, 4, &mut rng);
            let x = input(&mut s, "x", 3, 6, r);
            let h = input(&mut s, "h", 1, 5, r + 1);
            let t: f64 = rng.random();
            check(block, seed, &mut s, &|g, p| {
                let (xv, hv) = (g.param(p, x), g.param(p, h));
                let y = net.forward(g, p, xv, t, hv).unwrap();
                readout(g, y, r + 2)
            })
        }
        "extract_condition" => {
            let cfg = small_flow(WorldModelKind::Flow, TargetConvention::PaperLiteral, 2);
            let wm = WorldModel::new(cfg, 6, 2, 3, 8, &mut s, &mut rng).unwrap();
            let raw = input(&mut s, "raw", 2, 6, r);
            let scene = input(&mut s, "scene", 3, 8, r + 1);
            let wp = input(&mut s, "waypoints", 1, 12, r + 2);
            check(block, seed, &mut s, &|g, p| {
                let (rv, sv, wv) = (g.param(p, raw), g.param(p, scene), g.param(p, wp));
                let ex = wm.extract(g, p, rv, sv).unwrap();
                let h = wm.condition_with(g, p, ex.pooled, wv, 0.7, 1.3).unwrap();
                let a = readout(g, ex.z, r + 3);
                let b = readout(g, h, r + 4);
                g.add(a, b).unwrap()
            })
        }
        "planner" => {
            let cfg = PlannerConfig {
                n_modes: 3,
                d_model: 8,
                n_scene_queries: 2,
                obs_dim: 6,
                n_views: 3,
                ..PlannerConfig::default()
            };
            let planner = Planner::new(cfg, &mut s, &mut rng).unwrap();
            let features: Vec<Vec<f64>> = seeded_noise(3, 6, r).data().chunks(6).map(<[f64]>::to_vec).collect();
            let cmd = Command::ALL[(seed % 3) as usize];
            check(block, seed, &mut s, &|g, p| {
                let scene = planner.encode_scene(g, p, &features).unwrap();
                let d = planner.decode_raw(g, p, scene, cmd).unwrap();
                // anchors are constants; removing them keeps round-off small
                let anchors = g.constant(planner.anchor_tensor(cmd));
                let res = g.sub(d.waypoints, anchors).unwrap();
                let a = readout(g, res, r + 1);
                let b = readout(g, d.logits, r + 2);
                g.add(a, b).unwrap()
            })
        }
        "flow_loss" => {
            let (kind, conv) = match seed % 3 {
                0 => (WorldModelKind::Static, TargetConvention::PaperLiteral),
                1 => (WorldModelKind::Flow, TargetConvention::PaperLiteral),
                _ => (WorldModelKind::Flow, TargetConvention::PathDerivative),
            };
            let wm = WorldModel::new(small_flow(kind, conv, 3), 6, 2, 3, 8, &mut s, &mut rng).unwrap();
            let z: Vec<Tensor> = (0..4).map(|i| seeded_noise(3, 8, r + 10 + i)).collect();
            let pooled = input(&mut s, "pooled", 1, 8, r);
            let wp = [input(&mut s, "wp0", 1, 12, r + 1), input(&mut s, "wp1", 1, 12, r + 2)];
            check(block, seed, &mut s, &|g, p| {
                let pv = g.param(p, pooled);
                let h: Vec<Var> = wp
                    .iter()
                    .map(|&w| {
                        let wv = g.param(p, w);
                        wm.condition(g, p, pv, wv).unwrap()
                    })
                    .collect();
                let items = [(&z[0], &z[1], h[0]), (&z[2], &z[3], h[1])];
                // same draws on every evaluation keep the loss a function
                let mut draws = ChaCha8Rng::seed_from_u64(r + 5);
                wm.flow_loss(g, p, &items, &mut draws).unwrap()
            })
        }
        "rollout" => {
            let wm = WorldModel::new(
                small_flow(WorldModelKind::Flow, TargetConvention::PaperLiteral, 3),
                6,
                2,
                3,
                8,
                &mut s,
                &mut rng,
            )
            .unwrap();
            let z = input(&mut s, "z", 3, 8, r);
            let h = input(&mut s, "h", 1, 14, r + 1);
            let target = seeded_noise(3, 8, r + 2);
            let k = 1 + (seed % 4) as usize;
            check(block, seed, &mut s, &|g, p| {
                let (zv, hv) = (g.param(p, z), g.param(p, h));
                let ro = wm.rollout(g, p, zv, hv, k).unwrap();
                reconstruction_loss(g, ro.prediction, &target).unwrap()
            })
        }
        "loss_heads" => {
            let wp = input(&mut s, "waypoints", 3, 12, r);
            let logits = input(&mut s, "logits", 1, 3, r + 1);
            let pred = input(&mut s, "pred", 2, 4, r + 2);
            let flow = input(&mut s, "flow", 1, 1, r + 3);
            let gt: Vec<f64> = seeded_noise(1, 12, r + 4).into_data();
            let target = seeded_noise(2, 4, r + 5);
            let n_star = (seed % 3) as usize;
            let all = seed.is_multiple_of(2);
            check(block, seed, &mut s, &|g, p| {
                let (w, l, pr, f) = (g.param(p, wp), g.param(p, logits), g.param(p, pred), g.param(p, flow));
                let traj = trajectory_loss(g, w, &gt, n_star, all).unwrap();
                let score = score_loss(g, l, n_star).unwrap();
                let rec = reconstruction_loss(g, pr, &target).unwrap();
                let f2 = g.square(f);
                let fl = g.sum(f2);
                total_loss(g, traj, score, rec, fl, &LossWeights::default()).unwrap().0
            })
        }
        other => panic!("unknown block {other}"),
    }
}

pub const BLOCKS: [&str; 10] = [
    "linear",
    "mlp",
    "attention",
    "attention_block",
    "velocity_net",
    "extract_condition",
    "planner",
    "flow_loss",
    "rollout",
    "loss_heads",
];

/// Every block under `SEEDS_PER_BLOCK` seeds.
pub fn gradient_suite() -> Vec<Probe> {
    BLOCKS
        .iter()
        .flat_map(|&b| (0..SEEDS_PER_BLOCK).map(move |seed| block_case(b, seed)))
        .collect()
}
