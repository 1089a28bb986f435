//! Argument parsing and verb dispatch for the `latentflow` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latentflow::ablation::SweepSpec;
use latentflow::model::Model;
use latentflow::pipeline::{
    ablate_run, dataset_manifest_path, evaluate_run, gen_data, inspect_flow_run, load_checkpoint, train_run,
    CheckpointRef, InspectTarget, Manifest, PolicyChoice, RunSpec, Verb, MANIFEST_FILE,
};

/// Default root for run outputs when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "LATENTFLOW_OUT";

/// Exit status for a failed `--assert` check.
pub const EXIT_ASSERT: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "latentflow", version, about = "Flow-matching latent world model for toy trajectory planning")]
pub struct Cli {
    /// Root directory for outputs of verbs run without `--out`.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an episode dataset as line-delimited JSON.
    GenData(GenDataArgs),
    /// Train planner and world model jointly.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline policy on the test split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every variant of a sweep over several seeds.
    Ablate(AblateArgs),
    /// Dump per-step velocity norms and angles of world-model rollouts.
    InspectFlow(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config; defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set flow.K=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Episode file to use instead of generating episodes from the config.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Rerun from a manifest written by an earlier run of the same verb.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["config", "set", "dataset"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Seed of the first episode; later episodes use consecutive seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Scenario mix: mixed, empty or lead_braking.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Output dataset file.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for checkpoint, metrics and manifest.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write per-sample mode assessments as line-delimited JSON.
    #[arg(long, value_name = "PATH")]
    pub dump_selection: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint to evaluate; its stored config is the base config.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Policy to score: model, expert or constant-velocity.
    #[arg(long, default_value = "model")]
    pub policy: String,
    /// Output directory for the report files and manifest.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Built-in sweep (steps, selection, world, convention) or a TOML sweep file.
    #[arg(long, required_unless_present = "manifest")]
    pub sweep: Option<String>,
    /// Comma-separated seeds replacing the sweep's own list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Exit with status 1 when any directional check fails.
    #[arg(long = "assert")]
    pub assert_checks: bool,
    /// Output directory for the report files and manifest.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to inspect; a freshly initialized model is used when omitted.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Episode index in the dataset.
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    /// Planning tick inside the episode.
    #[arg(long, default_value_t = 0)]
    pub tick: usize,
    /// Single mode to inspect; all modes when omitted.
    #[arg(long)]
    pub mode: Option<usize>,
    /// Line-delimited JSON diagnostics file (default `<out>/flow.jsonl`).
    #[arg(long, value_name = "PATH")]
    pub dump_flow: Option<PathBuf>,
    /// Output directory for the manifest.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn load_manifest(path: &Path, verb: Verb) -> Result<Manifest> {
    let m = Manifest::load(path)?;
    if m.verb != verb {
        bail!(
            "manifest {} was written by `{}`, not `{}`",
            path.display(),
            m.verb.as_str(),
            verb.as_str()
        );
    }
    Ok(m)
}

/// Overrides from the shared flags, with `--dataset` recorded as a key.
fn overrides(cfg: &ConfigArgs, extra: Vec<String>) -> Result<Vec<String>> {
    let mut set = cfg.set.clone();
    set.extend(extra);
    if let Some(d) = &cfg.dataset {
        let path = d.to_str().context("dataset path is not valid UTF-8")?;
        set.push(format!("data.dataset={}", serde_json::to_string(path)?));
    }
    Ok(set)
}

fn spec(cfg: &ConfigArgs, extra: Vec<String>) -> Result<RunSpec> {
    Ok(RunSpec::new(cfg.config.as_deref(), &overrides(cfg, extra)?)?)
}

fn out_dir(given: &Option<PathBuf>, root: &Path, verb: Verb) -> PathBuf {
    given.clone().unwrap_or_else(|| root.join(verb.as_str()))
}

/// Runs one parsed command; `Ok(false)` means an `--assert` check failed.
pub fn run(cli: Cli) -> Result<bool> {
    let root = cli.out_root;
    match cli.command {
        Command::GenData(a) => {
            let spec = match &a.cfg.manifest {
                Some(p) => RunSpec::from_manifest(&load_manifest(p, Verb::GenData)?)?,
                None => {
                    let mut extra = Vec::new();
                    if let Some(s) = a.seed {
                        extra.push(format!("data.first_seed={s}"));
                    }
                    if let Some(n) = a.episodes {
                        extra.push(format!("data.episodes={n}"));
                    }
                    if let Some(sc) = &a.scenario {
                        extra.push(format!("data.scenario={}", serde_json::to_string(sc)?));
                    }
                    spec(&a.cfg, extra)?
                }
            };
            let out = a.out.unwrap_or_else(|| root.join("data").join("episodes.jsonl"));
            let (data, m) = gen_data(&spec, &out)?;
            eprintln!(
                "wrote {} episodes to {} (hash {}), manifest {}",
                data.len(),
                out.display(),
                m.dataset.hash,
                dataset_manifest_path(&out).display()
            );
        }
        Command::Train(a) => {
            let spec = match &a.cfg.manifest {
                Some(p) => RunSpec::from_manifest(&load_manifest(p, Verb::Train)?)?,
                None => spec(&a.cfg, Vec::new())?,
            };
            let dir = out_dir(&a.out, &root, Verb::Train);
            let run = train_run(&spec, &dir, a.dump_selection.as_deref())?;
            for r in &run.outcome.log {
                eprintln!(
                    "epoch {:>3}  total {:.4}  traj {:.4}  score {:.4}  rec {:.4}  flow {:.4}  agreement {:.3}",
                    r.epoch, r.loss.total, r.loss.traj, r.loss.score, r.loss.rec, r.loss.flow, r.agreement
                );
            }
            let s = &run.outcome.summary;
            println!(
                "val agreement {:.3} (chance {:.3}), checkpoint {} ({})",
                s.val_agreement,
                s.chance,
                dir.join("checkpoint.json").display(),
                s.checkpoint_hash
            );
        }
        Command::Evaluate(a) => {
            let (spec, policy, ck_path, ck_hash) = match &a.cfg.manifest {
                Some(p) => {
                    let m = load_manifest(p, Verb::Evaluate)?;
                    let ck = m.checkpoint.clone();
                    (
                        RunSpec::from_manifest(&m)?,
                        m.policy.unwrap_or_default(),
                        ck.as_ref().map(|c| c.path.clone()),
                        ck.map(|c| c.hash),
                    )
                }
                None => {
                    let policy: PolicyChoice = a.policy.parse()?;
                    let spec = match (&a.cfg.config, &a.checkpoint) {
                        (None, Some(ck)) => {
                            let base = load_checkpoint(ck, None)?.0.config;
                            RunSpec::from_base(base, None, &overrides(&a.cfg, Vec::new())?)?
                        }
                        _ => spec(&a.cfg, Vec::new())?,
                    };
                    (spec, policy, a.checkpoint.clone(), None)
                }
            };
            let loaded = match &ck_path {
                Some(p) => {
                    let (ck, r) = load_checkpoint(p, ck_hash.as_deref())?;
                    Some((ck.model()?, r))
                }
                None => None,
            };
            let dir = out_dir(&a.out, &root, Verb::Evaluate);
            let (report, _) = evaluate_run(&spec, policy, loaded.as_ref().map(|(m, r)| (m, r.clone())), &dir)?;
            print!("{}", report.to_text());
            eprintln!("reports in {}", dir.display());
        }
        Command::Ablate(a) => {
            let (spec, sweep) = match &a.cfg.manifest {
                Some(p) => {
                    let m = load_manifest(p, Verb::Ablate)?;
                    let sweep = m.sweep.clone().context("ablation manifest has no sweep")?;
                    (RunSpec::from_manifest(&m)?, sweep)
                }
                None => {
                    let name = a.sweep.as_deref().context("--sweep is required")?;
                    let mut sweep = if Path::new(name).is_file() {
                        SweepSpec::from_toml_str(
                            &std::fs::read_to_string(name).with_context(|| format!("reading sweep {name}"))?,
                        )?
                    } else {
                        SweepSpec::builtin(name)?
                    };
                    if let Some(seeds) = &a.seeds {
                        sweep.seeds = seeds.clone();
                    }
                    (spec(&a.cfg, Vec::new())?, sweep)
                }
            };
            let dir = out_dir(&a.out, &root, Verb::Ablate);
            let (report, _) = ablate_run(&spec, &sweep, &dir, |variant, seed, r| match r {
                Ok(r) => eprintln!("{variant} seed {seed}: l2_avg {:.3} cr_avg {:.3} pdms {:.3}", r.l2_avg, r.cr_avg, r.pdms),
                Err(e) => eprintln!("{variant} seed {seed}: failed: {e}"),
            })?;
            print!("{}", report.to_text());
            eprintln!("reports in {}", dir.display());
            if a.assert_checks && !report.all_checks_pass() {
                return Ok(false);
            }
        }
        Command::InspectFlow(a) => {
            let (spec, target, ck_path, ck_hash) = match &a.cfg.manifest {
                Some(p) => {
                    let m = load_manifest(p, Verb::InspectFlow)?;
                    let target = m.inspect.context("inspect manifest has no target")?;
                    let ck = m.checkpoint.clone();
                    (
                        RunSpec::from_manifest(&m)?,
                        target,
                        ck.as_ref().map(|c| c.path.clone()),
                        ck.map(|c| c.hash),
                    )
                }
                None => {
                    let target = InspectTarget {
                        episode: a.episode,
                        tick: a.tick,
                        mode: a.mode,
                    };
                    let spec = match (&a.cfg.config, &a.checkpoint) {
                        (None, Some(ck)) => {
                            let base = load_checkpoint(ck, None)?.0.config;
                            RunSpec::from_base(base, None, &overrides(&a.cfg, Vec::new())?)?
                        }
                        _ => spec(&a.cfg, Vec::new())?,
                    };
                    (spec, target, a.checkpoint.clone(), None)
                }
            };
            let (model, ck): (Model, Option<CheckpointRef>) = match &ck_path {
                Some(p) => {
                    let (ck, r) = load_checkpoint(p, ck_hash.as_deref())?;
                    (ck.model()?, Some(r))
                }
                None => (Model::new(spec.config.model(), spec.config.seed)?, None),
            };
            let dir = out_dir(&a.out, &root, Verb::InspectFlow);
            let (diags, _) = inspect_flow_run(&spec, &model, ck, target, &dir, a.dump_flow.as_deref())?;
            for d in &diags {
                let norms: Vec<String> = d.step_norms.iter().map(|n| format!("{n:.4}")).collect();
                println!(
                    "mode {}  stability {:.4}  rec {:.5}  traj {:.3}  norms [{}]",
                    d.mode,
                    d.stability,
                    d.rec_err,
                    d.traj_err,
                    norms.join(", ")
                );
            }
            eprintln!("manifest in {}", dir.join(MANIFEST_FILE).display());
        }
    }
    Ok(true)
}
