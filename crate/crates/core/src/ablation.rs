//! Multi-seed sweeps over config deltas with mean ± std tables and
//! directional checks between variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Policy};
use crate::sim::{Dataset, Split};
use crate::train::{train, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// `key=value` overrides applied on top of the base config.
    #[serde(default)]
    pub set: Vec<String>,
}

impl Variant {
    pub fn new(name: &str, set: &[&str]) -> Self {
        Self {
            name: name.into(),
            set: set.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2Avg,
    CrAvg,
    Pdms,
}

impl Metric {
    fn of(self, r: &SeedResult) -> f64 {
        match self {
            Metric::L2Avg => r.l2_avg,
            Metric::CrAvg => r.cr_avg,
            Metric::Pdms => r.pdms,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Metric::L2Avg => "l2_avg",
            Metric::CrAvg => "cr_avg",
            Metric::Pdms => "pdms",
        }
    }
}

/// `mean(metric | lhs) <= mean(metric | rhs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub metric: Metric,
    pub lhs: String,
    pub rhs: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(rename = "variant")]
    pub variants: Vec<Variant>,
    #[serde(default, rename = "check")]
    pub checks: Vec<Check>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(format!("sweep '{}' needs variants and seeds", self.name)));
        }
        for c in &self.checks {
            for v in [&c.lhs, &c.rhs] {
                if !self.variants.iter().any(|x| &x.name == v) {
                    return Err(Error::Config(format!("check names unknown variant '{v}'")));
                }
            }
        }
        Ok(())
    }

    /// Built-in sweeps: `steps`, `selection`, `world`, `convention`.
    pub fn builtin(name: &str) -> Result<Self> {
        let check = |metric, lhs: &str, rhs: &str| Check {
            metric,
            lhs: lhs.into(),
            rhs: rhs.into(),
        };
        let (variants, checks) = match name {
            "steps" => (
                vec![
                    Variant::new("K=1", &["flow.K=1"]),
                    Variant::new("K=3", &["flow.K=3"]),
                    Variant::new("K=5", &["flow.K=5"]),
                    Variant::new("K=10", &["flow.K=10"]),
                ],
                vec![check(Metric::L2Avg, "K=5", "K=1")],
            ),
            "selection" => (
                vec![
                    Variant::new(
                        "none",
                        &[
                            "loss.traj_all_modes=true",
                            "selection.lambda_rec=0.0",
                            "selection.lambda_theta=0.0",
                        ],
                    ),
                    Variant::new("l2_only", &["selection.lambda_rec=0.0", "selection.lambda_theta=0.0"]),
                    Variant::new("recons", &["selection.lambda_theta=0.0"]),
                    Variant::new("flow_stab", &[]),
                ],
                vec![check(Metric::CrAvg, "flow_stab", "l2_only")],
            ),
            "world" => (
                vec![
                    Variant::new("none", &["flow.kind=none"]),
                    Variant::new("static", &["flow.kind=static"]),
                    Variant::new("flow", &["flow.kind=flow"]),
                ],
                vec![check(Metric::L2Avg, "flow", "static")],
            ),
            "convention" => (
                vec![
                    Variant::new("paper_literal", &["flow.target_convention=paper_literal"]),
                    Variant::new("path_derivative", &["flow.target_convention=path_derivative"]),
                ],
                vec![],
            ),
            other => return Err(Error::Config(format!("unknown sweep '{other}'"))),
        };
        Ok(Self {
            name: name.into(),
            seeds: default_seeds(),
            variants,
            checks,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub l2_at: [f64; 3],
    pub l2_avg: f64,
    pub cr_at: [f64; 3],
    pub cr_avg: f64,
    pub pdms: f64,
    pub val_agreement: f64,
    pub checkpoint_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub l2_at: [MeanStd; 3],
    pub l2_avg: MeanStd,
    pub cr_at: [MeanStd; 3],
    pub cr_avg: MeanStd,
    pub pdms: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub set: Vec<String>,
    pub seeds: Vec<SeedResult>,
    pub summary: Option<VariantSummary>,
    /// Set when any seed failed to train or evaluate.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub description: String,
    pub lhs_mean: Option<f64>,
    pub rhs_mean: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub sweep: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
    pub checks: Vec<CheckResult>,
}

/// Trains one configuration and evaluates it on the test split.
pub fn run_seed(cfg: &RunConfig, data: &Dataset) -> Result<SeedResult> {
    let outcome = train(cfg, data)?;
    let test = data.split(Split::Test);
    let (report, _) = evaluate(Policy::Model(&outcome.model), &test)?;
    let m = report.metrics;
    Ok(SeedResult {
        seed: cfg.seed,
        l2_at: m.l2_at.to_array(),
        l2_avg: m.l2_avg,
        cr_at: m.cr_at.to_array(),
        cr_avg: m.cr_avg,
        pdms: report.pdms,
        val_agreement: outcome.summary.val_agreement,
        checkpoint_hash: outcome.summary.checkpoint_hash,
    })
}

fn summarize(seeds: &[SeedResult]) -> VariantSummary {
    let col = |f: &dyn Fn(&SeedResult) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
    VariantSummary {
        l2_at: [0, 1, 2].map(|i| col(&|r| r.l2_at[i])),
        l2_avg: col(&|r| r.l2_avg),
        cr_at: [0, 1, 2].map(|i| col(&|r| r.cr_at[i])),
        cr_avg: col(&|r| r.cr_avg),
        pdms: col(&|r| r.pdms),
    }
}

/// Runs every variant for every seed. A failing variant is recorded and
/// the sweep moves on. `progress` is called after each seed.
pub fn run_ablation(
    base: &RunConfig,
    spec: &SweepSpec,
    data: &Dataset,
    mut progress: impl FnMut(&str, u64, &Result<SeedResult>),
) -> Result<AblationReport> {
    spec.validate()?;
    let mut variants = Vec::with_capacity(spec.variants.len());
    // variants that resolve to the same config share their training runs
    let mut done: Vec<(RunConfig, SeedResult)> = Vec::new();
    for v in &spec.variants {
        let mut seeds = Vec::new();
        let mut error = None;
        for &seed in &spec.seeds {
            let mut set = v.set.clone();
            set.push(format!("seed={seed}"));
            let result = base.with_overrides(&set).and_then(|cfg| {
                if let Some((_, r)) = done.iter().find(|(c, _)| *c == cfg) {
                    return Ok(r.clone());
                }
                let r = run_seed(&cfg, data)?;
                done.push((cfg, r.clone()));
                Ok(r)
            });
            progress(&v.name, seed, &result);
            match result {
                Ok(r) => seeds.push(r),
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let summary = (error.is_none() && !seeds.is_empty()).then(|| summarize(&seeds));
        variants.push(VariantResult {
            name: v.name.clone(),
            set: v.set.clone(),
            seeds,
            summary,
            error,
        });
    }
    let checks = spec
        .checks
        .iter()
        .map(|c| {
            let mean = |name: &str| {
                variants
                    .iter()
                    .find(|v| v.name == name && v.error.is_none())
                    .map(|v| MeanStd::of(&v.seeds.iter().map(|r| c.metric.of(r)).collect::<Vec<_>>()).mean)
            };
            let (l, r) = (mean(&c.lhs), mean(&c.rhs));
            CheckResult {
                description: format!("mean {}({}) <= mean {}({})", c.metric.as_str(), c.lhs, c.metric.as_str(), c.rhs),
                lhs_mean: l,
                rhs_mean: r,
                passed: matches!((l, r), (Some(a), Some(b)) if a <= b),
            }
        })
        .collect();
    Ok(AblationReport {
        sweep: spec.name.clone(),
        seeds: spec.seeds.clone(),
        variants,
        checks,
    })
}

impl AblationReport {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sweep {}  seeds {:?}", self.sweep, self.seeds);
        let _ = writeln!(
            s,
            "{:<16}{:>16}{:>16}{:>16}{:>16}{:>16}{:>16}",
            "variant", "L2 1s", "L2 2s", "L2 3s", "L2 avg", "CR avg (%)", "PDMS"
        );
        let cell = |m: MeanStd| format!("{:.3}±{:.3}", m.mean, m.std);
        for v in &self.variants {
            match &v.summary {
                Some(sm) => {
                    let _ = writeln!(
                        s,
                        "{:<16}{:>16}{:>16}{:>16}{:>16}{:>16}{:>16}",
                        v.name,
                        cell(sm.l2_at[0]),
                        cell(sm.l2_at[1]),
                        cell(sm.l2_at[2]),
                        cell(sm.l2_avg),
                        cell(sm.cr_avg),
                        cell(sm.pdms)
                    );
                }
                None => {
                    let _ = writeln!(s, "{:<16}failed: {}", v.name, v.error.as_deref().unwrap_or("?"));
                }
            }
        }
        for c in &self.checks {
            let _ = writeln!(s, "[{}] {}", if c.passed { "pass" } else { "FAIL" }, c.description);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,l2_1s,l2_2s,l2_3s,l2_avg,cr_1s,cr_2s,cr_3s,cr_avg,pdms\n");
        for v in &self.variants {
            for r in &v.seeds {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    v.name,
                    r.seed,
                    r.l2_at[0],
                    r.l2_at[1],
                    r.l2_at[2],
                    r.l2_avg,
                    r.cr_at[0],
                    r.cr_at[1],
                    r.cr_at[2],
                    r.cr_avg,
                    r.pdms
                );
            }
        }
        s
    }
}
