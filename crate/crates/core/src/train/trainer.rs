use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, GradMap, Graph, Tensor};
use crate::error::{Error, Result};
use crate::flow::WorldModelKind;
use crate::model::Model;
use crate::planner::{argmax_index, flatten_points, unflatten_points};
use crate::selection::{
    argmin_index, mean_squared_error, mean_waypoint_error, select_best_mode, stability_score,
    ModeAssessment,
};
use crate::sim::{Dataset, Episode, Observer, ScenarioConfig, Split};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::losses::{reconstruction_loss, score_loss, total_loss, trajectory_loss, LossComponents};

/// Separates the trainer's stream from the initialization stream.
const TRAIN_STREAM: u64 = 1;
const VALIDATION_SEED: u64 = 0x0a11_da7e;

/// One planning instant: an episode index and a tick inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub episode: usize,
    pub tick: usize,
}

pub fn samples(data: &Dataset) -> Vec<Sample> {
    data.episodes
        .iter()
        .enumerate()
        .flat_map(|(i, ep)| ep.plannable_ticks().map(move |t| Sample { episode: i, tick: t }))
        .collect()
}

/// Reads the configured dataset file, or generates the configured episodes.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.dataset {
        Some(path) => Dataset::read(path),
        None => {
            let scenario = ScenarioConfig::by_name(&cfg.data.scenario)?;
            Dataset::generate(
                cfg.data.first_seed,
                cfg.data.episodes,
                &scenario,
                &Observer::new(cfg.observer),
            )
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// All four losses and their parameter gradients.
    Train,
    /// Selection only: `n*`, assessments and the score head's choice.
    Assess,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossComponents,
    pub n_star: usize,
    pub predicted: usize,
    pub assessments: Vec<ModeAssessment>,
    pub grads: Option<GradMap>,
}

/// Forward pass (and optionally backward) for one sample with the current
/// weights.
pub fn sample_step(
    model: &Model,
    cfg: &RunConfig,
    ep: &Episode,
    t: usize,
    mode: StepMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let p = &model.params;
    let planner = &model.planner;
    let world = &model.world;
    let features = ep.observe(t)?;
    let command = ep.commands[t];
    let gt = &ep.expert_trajectory[t];
    let gt_flat = flatten_points(gt);

    let mut g = Graph::new();
    let scene = planner.encode_scene(&mut g, p, features)?;
    let decoded = planner.decode(&mut g, p, scene, command)?;
    let wp = g.value(decoded.waypoints).clone();
    let n = wp.rows();
    let traj_errs = (0..n)
        .map(|i| mean_waypoint_error(&unflatten_points(wp.row_slice(i)), gt))
        .collect::<Result<Vec<_>>>()?;
    let predicted = argmax_index(g.value(decoded.logits).data()).unwrap_or(0);
    let w = &cfg.selection;

    let zero = g.constant(Tensor::scalar(0.0));
    let (assessments, n_star, rec, flow) = if world.config.kind == WorldModelKind::None {
        let a = traj_errs
            .iter()
            .map(|&e| ModeAssessment::new(e, 0.0, 0.0, w))
            .collect::<Result<Vec<_>>>()?;
        let best = select_best_mode(&a)?;
        (a, best, zero, zero)
    } else {
        let raw = g.constant(planner.observation_tensor(features)?);
        let ex = world.extract(&mut g, p, raw, scene)?;
        let (z_next, _) = model.world_latent(ep.observe(t + 1)?)?;
        let k = world.steps();
        let mut rollouts = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        for (i, &traj_err) in traj_errs.iter().enumerate() {
            let wv = g.constant(Tensor::row(wp.row_slice(i).to_vec()));
            let h = world.condition(&mut g, p, ex.pooled, wv)?;
            let r = world.rollout(&mut g, p, ex.z, h, k)?;
            let vels: Vec<&[f64]> = r.velocities.iter().map(|v| g.value(*v).data()).collect();
            let stability = stability_score(&vels);
            let rec_err = mean_squared_error(g.value(r.prediction), &z_next)?;
            a.push(ModeAssessment::new(traj_err, rec_err, stability, w)?);
            rollouts.push(r);
        }
        let best = select_best_mode(&a)?;
        if mode == StepMode::Assess {
            (a, best, zero, zero)
        } else {
            let rec = reconstruction_loss(&mut g, rollouts[best].prediction, &z_next)?;
            let nearest = argmin_index(&traj_errs).unwrap_or(0);
            let mut conds = vec![nearest];
            if n > 1 {
                let other = rng.random_range(0..n - 1);
                conds.push(if other >= nearest { other + 1 } else { other });
            }
            let z_t = g.value(ex.z).clone();
            let pooled = g.value(ex.pooled).clone();
            let mut hs = Vec::with_capacity(conds.len());
            for &c in &conds {
                let pv = g.constant(pooled.clone());
                let wv = g.constant(Tensor::row(wp.row_slice(c).to_vec()));
                hs.push(world.condition(&mut g, p, pv, wv)?);
            }
            let items: Vec<(&Tensor, &Tensor, _)> = hs.iter().map(|&h| (&z_t, &z_next, h)).collect();
            let flow = world.flow_loss(&mut g, p, &items, rng)?;
            (a, best, rec, flow)
        }
    };

    if mode == StepMode::Assess {
        return Ok(StepOutput {
            losses: LossComponents::default(),
            n_star,
            predicted,
            assessments,
            grads: None,
        });
    }
    let traj = trajectory_loss(&mut g, decoded.waypoints, &gt_flat, n_star, cfg.loss.traj_all_modes)?;
    let score = score_loss(&mut g, decoded.logits, n_star)?;
    let (total, losses) = total_loss(&mut g, traj, score, rec, flow, &cfg.loss)?;
    g.backward(total)?;
    Ok(StepOutput {
        losses,
        n_star,
        predicted,
        assessments,
        grads: Some(g.param_grads(p)),
    })
}

/// Per-epoch training record, one line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub samples: usize,
    pub loss: LossComponents,
    /// Fraction of samples where the score head's argmax equals `n*`.
    pub agreement: f64,
    pub mean_stability: f64,
    pub n_star_histogram: Vec<usize>,
    pub mean_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub train_samples: usize,
    pub first_epoch_flow: Option<f64>,
    pub final_epoch_flow: Option<f64>,
    pub val_samples: usize,
    pub val_agreement: f64,
    pub chance: f64,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

/// Optional side outputs of a training run.
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// Directory receiving `checkpoint.json` after every epoch and `metrics.jsonl`.
    pub out_dir: Option<&'a Path>,
    /// Per-sample selection records (line-delimited JSON).
    pub selection: Option<&'a mut dyn Write>,
}

#[derive(Serialize)]
struct SelectionRecord<'a> {
    epoch: usize,
    episode: &'a str,
    tick: usize,
    n_star: usize,
    predicted: usize,
    modes: Vec<ModeRecord>,
}

#[derive(Serialize)]
struct ModeRecord {
    mode: usize,
    traj_err: f64,
    rec_err: f64,
    stability: f64,
    criterion: f64,
}

fn write_selection(
    w: &mut dyn Write,
    epoch: usize,
    ep: &Episode,
    tick: usize,
    out: &StepOutput,
) -> Result<()> {
    let rec = SelectionRecord {
        epoch,
        episode: &ep.id,
        tick,
        n_star: out.n_star,
        predicted: out.predicted,
        modes: out
            .assessments
            .iter()
            .enumerate()
            .map(|(i, a)| ModeRecord {
                mode: i,
                traj_err: a.traj_err,
                rec_err: a.rec_err,
                stability: a.stability,
                criterion: a.criterion,
            })
            .collect(),
    };
    serde_json::to_writer(&mut *w, &rec)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, TrainSinks::default())
}

/// Trains on the train split and measures score-head agreement with `n*` on
/// the validation split.
pub fn train_with(cfg: &RunConfig, data: &Dataset, mut sinks: TrainSinks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training needs a non-empty dataset"));
    }
    let train_set = data.split(Split::Train);
    let val_set = data.split(Split::Val);
    let mut train_samples = samples(&train_set);
    if cfg.train.max_samples > 0 {
        train_samples.truncate(cfg.train.max_samples);
    }
    if train_samples.is_empty() {
        return Err(Error::contract("train split has no plannable ticks"));
    }

    let mut model = Model::new(cfg.model(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam()?, &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);

    let mut metrics = match sinks.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let n_modes = cfg.planner.n_modes;
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let (mut agree, mut stab_sum, mut steps, mut norm_sum) = (0usize, 0.0, 0usize, 0.0);
        let mut hist = vec![0usize; n_modes];
        for batch in order.chunks(cfg.train.batch_size) {
            let mut grads = GradMap::zeros(&model.params);
            for &idx in batch {
                let s = train_samples[idx];
                let ep = &train_set.episodes[s.episode];
                let out = sample_step(&model, cfg, ep, s.tick, StepMode::Train, &mut rng)?;
                if let Some(w) = sinks.selection.as_deref_mut() {
                    write_selection(w, epoch, ep, s.tick, &out)?;
                }
                grads.accumulate(out.grads.as_ref().expect("train step has grads"));
                let l = &out.losses;
                sum.traj += l.traj;
                sum.score += l.score;
                sum.rec += l.rec;
                sum.flow += l.flow;
                sum.total += l.total;
                agree += usize::from(out.predicted == out.n_star);
                stab_sum += out.assessments[out.n_star].stability;
                hist[out.n_star] += 1;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite {
                    component: "gradient",
                    value: grads.global_norm(),
                });
            }
            norm_sum += grads.clip_global_norm(cfg.train.clip_norm);
            adam.step(&mut model.params, &grads)?;
            steps += 1;
        }
        let m = train_samples.len() as f64;
        let record = EpochRecord {
            epoch,
            steps,
            samples: train_samples.len(),
            loss: LossComponents {
                traj: sum.traj / m,
                score: sum.score / m,
                rec: sum.rec / m,
                flow: sum.flow / m,
                total: sum.total / m,
            },
            agreement: agree as f64 / m,
            mean_stability: stab_sum / m,
            n_star_histogram: hist,
            mean_grad_norm: norm_sum / steps as f64,
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if let Some(dir) = sinks.out_dir {
            Checkpoint::capture(cfg, epoch, &model, &adam, &rng).save(&dir.join("checkpoint.json"))?;
        }
        log.push(record);
    }

    let val_samples = samples(&val_set);
    let val_agreement = agreement(&model, cfg, &val_set, &val_samples)?;
    let checkpoint = Checkpoint::capture(cfg, cfg.train.epochs, &model, &adam, &rng);
    if let Some(dir) = sinks.out_dir {
        checkpoint.save(&dir.join("checkpoint.json"))?;
    }
    let summary = TrainSummary {
        epochs: cfg.train.epochs,
        train_samples: train_samples.len(),
        first_epoch_flow: log.first().map(|r| r.loss.flow),
        final_epoch_flow: log.last().map(|r| r.loss.flow),
        val_samples: val_samples.len(),
        val_agreement,
        chance: 1.0 / n_modes as f64,
        checkpoint_hash: checkpoint.hash()?,
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        summary,
    })
}

/// Fraction of samples whose argmax score equals the selected `n*`.
pub fn agreement(model: &Model, cfg: &RunConfig, data: &Dataset, items: &[Sample]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_SEED);
    let mut hits = 0usize;
    for s in items {
        let out = sample_step(model, cfg, &data.episodes[s.episode], s.tick, StepMode::Assess, &mut rng)?;
        hits += usize::from(out.predicted == out.n_star);
    }
    Ok(hits as f64 / items.len() as f64)
}
