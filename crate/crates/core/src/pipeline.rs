//! Run orchestration: output files and reproduction manifests for every verb.
//!
//! Each run writes `manifest.json` holding the resolved config, the override
//! list, the dataset hash and hashes of every output file. Feeding a
//! manifest back into [`RunSpec::from_manifest`] reruns the same work.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{run_ablation, AblationReport, SeedResult, SweepSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Policy};
use crate::model::Model;
use crate::selection::{angle_between, mean_squared_error, mean_waypoint_error, sequence_stability};
use crate::sim::{Dataset, Split};
use crate::train::{load_dataset, train_with, Checkpoint, RunConfig, TrainOutcome, TrainSinks};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    GenData,
    Train,
    Evaluate,
    Ablate,
    InspectFlow,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::GenData => "gen-data",
            Verb::Train => "train",
            Verb::Evaluate => "evaluate",
            Verb::Ablate => "ablate",
            Verb::InspectFlow => "inspect-flow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    /// `None` when the episodes were generated from the config on the fly.
    pub path: Option<PathBuf>,
    pub hash: String,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub hash: String,
}

/// Which policy `evaluate` scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    #[default]
    Model,
    Expert,
    ConstantVelocity,
}

impl std::str::FromStr for PolicyChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "expert" => Ok(Self::Expert),
            "constant-velocity" | "cv" => Ok(Self::ConstantVelocity),
            other => Err(Error::Config(format!(
                "unknown policy `{other}` (expected model, expert or constant-velocity)"
            ))),
        }
    }
}

/// Episode, tick and optional mode examined by `inspect-flow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectTarget {
    pub episode: usize,
    pub tick: usize,
    /// All modes when `None`.
    pub mode: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub verb: Verb,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Config after overrides; the source of truth on rerun.
    pub config: RunConfig,
    pub seed: u64,
    pub dataset: DatasetRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inspect: Option<InspectTarget>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("malformed manifest {}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest format {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn hash_outputs(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.to_string(), file_hash(&dir.join(n))?)))
        .collect()
}

/// A resolved configuration plus where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Dataset hash the run must see; set when rerunning a manifest.
    pub expected_dataset_hash: Option<String>,
}

impl RunSpec {
    /// Loads `config_path` (defaults when absent) and applies `overrides`.
    pub fn new(config_path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match config_path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Self::from_base(base, config_path.map(Path::to_path_buf), overrides)
    }

    pub fn from_base(base: RunConfig, config_path: Option<PathBuf>, overrides: &[String]) -> Result<Self> {
        let config = base.with_overrides(overrides)?;
        config.validate()?;
        Ok(Self {
            config,
            config_path,
            overrides: overrides.to_vec(),
            expected_dataset_hash: None,
        })
    }

    /// The stored config is already resolved, so no overrides are reapplied.
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        m.config.validate()?;
        Ok(Self {
            config: m.config.clone(),
            config_path: m.config_path.clone(),
            overrides: m.overrides.clone(),
            expected_dataset_hash: Some(m.dataset.hash.clone()),
        })
    }

    /// Loads or generates the dataset and checks it against the expected hash.
    pub fn dataset(&self) -> Result<(Dataset, DatasetRef)> {
        let data = load_dataset(&self.config)?;
        let hash = data.content_hash()?;
        if let Some(want) = &self.expected_dataset_hash {
            if *want != hash {
                return Err(Error::Config(format!(
                    "dataset hash {hash} does not match manifest hash {want}"
                )));
            }
        }
        let r = DatasetRef {
            path: self.config.data.dataset.clone(),
            hash,
            episodes: data.len(),
        };
        Ok((data, r))
    }

    fn manifest(&self, verb: Verb, dataset: DatasetRef) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            verb,
            config_path: self.config_path.clone(),
            overrides: self.overrides.clone(),
            config: self.config.clone(),
            seed: self.config.seed,
            dataset,
            checkpoint: None,
            policy: None,
            sweep: None,
            inspect: None,
            outputs: BTreeMap::new(),
        }
    }
}

/// Manifest path written next to a dataset file (`x.jsonl` → `x.manifest.json`).
pub fn dataset_manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Generates the configured episodes into `out`.
pub fn gen_data(spec: &RunSpec, out: &Path) -> Result<(Dataset, Manifest)> {
    let mut cfg = spec.config.clone();
    cfg.data.dataset = None;
    let gen = RunSpec { config: cfg, ..spec.clone() };
    let (data, mut dref) = gen.dataset()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data.write(out)?;
    dref.path = Some(out.to_path_buf());
    let mut m = gen.manifest(Verb::GenData, dref);
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    m.outputs.insert(name, file_hash(out)?);
    m.save(&dataset_manifest_path(out))?;
    Ok((data, m))
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub manifest: Manifest,
}

/// Trains, writing `checkpoint.json`, `metrics.jsonl`, `summary.json` and
/// the manifest into `out_dir`, plus selection records to `dump_selection`.
pub fn train_run(spec: &RunSpec, out_dir: &Path, dump_selection: Option<&Path>) -> Result<TrainRun> {
    let (data, dref) = spec.dataset()?;
    std::fs::create_dir_all(out_dir)?;
    let mut dump = dump_selection
        .map(|p| File::create(p).map(BufWriter::new))
        .transpose()?;
    let outcome = train_with(
        &spec.config,
        &data,
        TrainSinks {
            out_dir: Some(out_dir),
            selection: dump.as_mut().map(|w| w as &mut dyn Write),
        },
    )?;
    if let Some(mut w) = dump {
        w.flush()?;
    }
    write_json(&out_dir.join("summary.json"), &outcome.summary)?;
    let mut m = spec.manifest(Verb::Train, dref);
    m.outputs = hash_outputs(out_dir, &["checkpoint.json", "metrics.jsonl", "summary.json"])?;
    m.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(TrainRun { outcome, manifest: m })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Loads a checkpoint and checks its hash when one is expected.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(Checkpoint, CheckpointRef)> {
    let ck = Checkpoint::load(path)?;
    let hash = ck.hash()?;
    if let Some(want) = expected_hash {
        if want != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint hash {hash} does not match manifest hash {want}"
            )));
        }
    }
    Ok((
        ck,
        CheckpointRef {
            path: path.to_path_buf(),
            hash,
        },
    ))
}

/// Scores a policy on the test split, writing `report.json`, `report.txt`,
/// `report.csv` and the manifest into `out_dir`.
pub fn evaluate_run(
    spec: &RunSpec,
    policy: PolicyChoice,
    checkpoint: Option<(&Model, CheckpointRef)>,
    out_dir: &Path,
) -> Result<(EvalReport, Manifest)> {
    let (data, dref) = spec.dataset()?;
    let test = data.split(Split::Test);
    let p = match (policy, &checkpoint) {
        (PolicyChoice::Model, Some((model, _))) => Policy::Model(model),
        (PolicyChoice::Model, None) => {
            return Err(Error::Config("evaluating the model policy needs a checkpoint".into()))
        }
        (PolicyChoice::Expert, _) => Policy::Expert,
        (PolicyChoice::ConstantVelocity, _) => Policy::ConstantVelocity,
    };
    let (report, _) = evaluate(p, &test)?;
    if report.flow_calls != 0 {
        return Err(Error::contract(format!(
            "evaluation invoked the velocity field {} times",
            report.flow_calls
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("report.json"), &report)?;
    std::fs::write(out_dir.join("report.txt"), report.to_text())?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    let mut m = spec.manifest(Verb::Evaluate, dref);
    m.policy = Some(policy);
    m.checkpoint = checkpoint.map(|(_, r)| r);
    m.outputs = hash_outputs(out_dir, &["report.json", "report.txt", "report.csv"])?;
    m.save(&out_dir.join(MANIFEST_FILE))?;
    Ok((report, m))
}

/// Runs a sweep, writing `ablation.json`, `ablation.txt`, `ablation.csv`
/// and the manifest into `out_dir`.
pub fn ablate_run(
    spec: &RunSpec,
    sweep: &SweepSpec,
    out_dir: &Path,
    progress: impl FnMut(&str, u64, &Result<SeedResult>),
) -> Result<(AblationReport, Manifest)> {
    let (data, dref) = spec.dataset()?;
    let report = run_ablation(&spec.config, sweep, &data, progress)?;
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("ablation.json"), &report)?;
    std::fs::write(out_dir.join("ablation.txt"), report.to_text())?;
    std::fs::write(out_dir.join("ablation.csv"), report.to_csv())?;
    let mut m = spec.manifest(Verb::Ablate, dref);
    m.sweep = Some(sweep.clone());
    m.outputs = hash_outputs(out_dir, &["ablation.json", "ablation.txt", "ablation.csv"])?;
    m.save(&out_dir.join(MANIFEST_FILE))?;
    Ok((report, m))
}

/// Velocity diagnostics of one mode's world-model rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostic {
    pub episode: String,
    pub tick: usize,
    pub mode: usize,
    pub steps: usize,
    pub score_logit: f64,
    pub traj_err: f64,
    pub rec_err: f64,
    pub stability: f64,
    pub step_norms: Vec<f64>,
    /// Angle between steps `k` and `k+1`; `null` when either velocity is zero.
    pub consecutive_angles: Vec<Option<f64>>,
    /// Angle between every pair of steps.
    pub pairwise_angles: Vec<Vec<Option<f64>>>,
}

/// Rolls out the world model for the chosen episode and tick under each
/// requested mode and measures the velocity sequence.
pub fn inspect_flow(model: &Model, data: &Dataset, target: InspectTarget) -> Result<Vec<FlowDiagnostic>> {
    let ep = data.episodes.get(target.episode).ok_or(Error::Bounds {
        what: "inspect episode",
        index: target.episode,
        len: data.len(),
    })?;
    let t = target.tick;
    if !ep.plannable_ticks().contains(&t) {
        return Err(Error::Bounds {
            what: "inspect tick",
            index: t,
            len: ep.plannable_ticks().end() + 1,
        });
    }
    let set = model.plan(ep.observe(t)?, ep.commands[t])?;
    let modes: Vec<usize> = match target.mode {
        Some(m) if m >= set.modes.len() => {
            return Err(Error::Bounds {
                what: "inspect mode",
                index: m,
                len: set.modes.len(),
            })
        }
        Some(m) => vec![m],
        None => (0..set.modes.len()).collect(),
    };
    let (z_t, pooled) = model.world_latent(ep.observe(t)?)?;
    let (z_next, _) = model.world_latent(ep.observe(t + 1)?)?;
    let world = &model.world;
    let c = &world.config;
    let steps = world.steps();
    modes
        .into_iter()
        .map(|i| {
            let mode = &set.modes[i];
            let h = world.fuse_condition(&model.params, &pooled, &mode.waypoints, c.lambda_z, c.lambda_t)?;
            let (pred, vels) = world.integrate_future(&model.params, &z_t, &h, steps)?;
            let flat = vels.flattened();
            let angle = |a: usize, b: usize| angle_between(flat[a], flat[b]);
            Ok(FlowDiagnostic {
                episode: ep.id.clone(),
                tick: t,
                mode: i,
                steps,
                score_logit: mode.score_logit,
                traj_err: mean_waypoint_error(&mode.waypoints, &ep.expert_trajectory[t])?,
                rec_err: mean_squared_error(&pred, &z_next)?,
                stability: sequence_stability(&vels),
                step_norms: flat.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
                consecutive_angles: (1..flat.len()).map(|k| angle(k - 1, k)).collect(),
                pairwise_angles: (0..flat.len())
                    .map(|a| (0..flat.len()).map(|b| angle(a, b)).collect())
                    .collect(),
            })
        })
        .collect()
}

/// Runs [`inspect_flow`], writing one JSON line per mode to `dump` and the
/// manifest into `out_dir`.
pub fn inspect_flow_run(
    spec: &RunSpec,
    model: &Model,
    checkpoint: Option<CheckpointRef>,
    target: InspectTarget,
    out_dir: &Path,
    dump: Option<&Path>,
) -> Result<(Vec<FlowDiagnostic>, Manifest)> {
    let (data, dref) = spec.dataset()?;
    let diags = inspect_flow(model, &data, target)?;
    std::fs::create_dir_all(out_dir)?;
    let default_dump = out_dir.join("flow.jsonl");
    let dump = dump.unwrap_or(&default_dump);
    let mut w = BufWriter::new(File::create(dump)?);
    for d in &diags {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut m = spec.manifest(Verb::InspectFlow, dref);
    m.checkpoint = checkpoint;
    m.inspect = Some(target);
    m.outputs.insert(
        dump.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        file_hash(dump)?,
    );
    m.save(&out_dir.join(MANIFEST_FILE))?;
    Ok((diags, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Vec<String> {
        [
            "data.episodes=10",
            "train.epochs=1",
            "train.max_samples=6",
            "train.batch_size=3",
            "flow.K=2",
        ]
        .map(String::from)
        .to_vec()
    }

    #[test]
    fn train_manifest_reruns_to_same_hash() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RunSpec::new(None, &tiny()).unwrap();
        let a = train_run(&spec, &dir.path().join("a"), None).unwrap();
        let m = Manifest::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, a.manifest);
        assert_eq!(m.config.flow.k, 2);
        assert_eq!(m.overrides, tiny());
        let b = train_run(&RunSpec::from_manifest(&m).unwrap(), &dir.path().join("b"), None).unwrap();
        assert_eq!(a.outcome.summary.checkpoint_hash, b.outcome.summary.checkpoint_hash);
        assert_eq!(a.manifest.outputs, b.manifest.outputs);
    }

    #[test]
    fn dataset_hash_mismatch_is_rejected() {
        let spec = RunSpec::new(None, &tiny()).unwrap();
        let mut m = spec.manifest(Verb::Train, spec.dataset().unwrap().1);
        m.dataset.hash = "00".into();
        assert!(matches!(
            RunSpec::from_manifest(&m).unwrap().dataset(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gen_data_writes_dataset_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d").join("train.jsonl");
        let spec = RunSpec::new(None, &["data.episodes=3".to_string()]).unwrap();
        let (data, m) = gen_data(&spec, &out).unwrap();
        assert_eq!(Dataset::read(&out).unwrap(), data);
        assert_eq!(m.dataset.episodes, 3);
        assert_eq!(Manifest::load(&dataset_manifest_path(&out)).unwrap(), m);
    }

    #[test]
    fn evaluate_baselines_without_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RunSpec::new(None, &["data.episodes=5".to_string()]).unwrap();
        let (r, m) = evaluate_run(&spec, PolicyChoice::Expert, None, dir.path()).unwrap();
        assert_eq!(r.metrics.l2_avg, 0.0);
        assert_eq!(r.flow_calls, 0);
        assert_eq!(m.outputs.len(), 3);
        assert!(evaluate_run(&spec, PolicyChoice::Model, None, dir.path()).is_err());
    }

    #[test]
    fn inspect_reports_every_mode() {
        let spec = RunSpec::new(None, &tiny()).unwrap();
        let (data, _) = spec.dataset().unwrap();
        let model = Model::new(spec.config.model(), spec.config.seed).unwrap();
        let target = InspectTarget { episode: 0, tick: 0, mode: None };
        let d = inspect_flow(&model, &data, target).unwrap();
        assert_eq!(d.len(), spec.config.planner.n_modes);
        for x in &d {
            assert_eq!(x.step_norms.len(), 2);
            assert_eq!(x.consecutive_angles.len(), 1);
            assert_eq!(x.pairwise_angles[0][0], Some(0.0));
            assert!((x.consecutive_angles[0].unwrap_or(0.0) - x.stability).abs() < 1e-12);
        }
        let bad = InspectTarget { mode: Some(99), ..target };
        assert!(matches!(inspect_flow(&model, &data, bad), Err(Error::Bounds { .. })));
    }
}
