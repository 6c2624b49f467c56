//! Temperature × step-size sweeps and their aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::TokenId;
use crate::error::{invalid, Result};
use crate::eval::{pass_at_k, run_problem, RunReport};
use crate::guidance::{GenerationConfig, GuidanceKind};
use crate::models::Problem;

/// A sweep over temperatures, step sizes, guidance methods and seeds.
/// Every other setting comes from `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
    pub guidances: Vec<GuidanceKind>,
    pub seeds: Vec<u64>,
    pub base: GenerationConfig,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.temperatures.is_empty() || self.alphas.is_empty() || self.guidances.is_empty() || self.seeds.is_empty()
        {
            return Err(invalid("grid lists must be non-empty"));
        }
        if self.temperatures.iter().chain(&self.alphas).any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(invalid("grid temperatures and step sizes must be finite and non-negative"));
        }
        self.base.sampler.validate()
    }

    /// Configurations in sweep order: guidance, temperature, step size, seed.
    pub fn configs(&self) -> Vec<GenerationConfig> {
        let mut out = Vec::new();
        for &kind in &self.guidances {
            for &theta in &self.temperatures {
                for &alpha in &self.alphas {
                    for &seed in &self.seeds {
                        let mut c = self.base.clone();
                        c.sampler.temperature = theta;
                        c.sampler.seed = seed;
                        c.guidance.kind = kind;
                        c.guidance.alpha = alpha;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

/// Mean ± standard error over seeds of Pass@k for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRow {
    pub guidance: GuidanceKind,
    pub theta: f64,
    pub alpha: f64,
    pub k: usize,
    pub mean: f64,
    pub se: f64,
    /// Seeds that contributed.
    pub n: usize,
}

/// Per-cell summary used for Pareto plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub guidance: GuidanceKind,
    pub theta: f64,
    pub alpha: f64,
    /// All runs in the cell, failed ones included.
    pub runs: usize,
    pub failed: usize,
    pub batch: usize,
    pub pass_at_1: Option<f64>,
    pub pass_at_batch: Option<f64>,
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub pass: Vec<PassRow>,
    pub cells: Vec<CellSummary>,
}

impl Aggregates {
    pub fn cell(&self, guidance: GuidanceKind, theta: f64, alpha: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.guidance == guidance && c.theta == theta && c.alpha == alpha)
    }

    pub fn pass_at(&self, guidance: GuidanceKind, theta: f64, alpha: f64, k: usize) -> Option<&PassRow> {
        self.pass.iter().find(|r| r.guidance == guidance && r.theta == theta && r.alpha == alpha && r.k == k)
    }
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub reports: Vec<RunReport>,
    pub aggregates: Aggregates,
}

/// Runs every (config × problem) cell in parallel. A failing cell is
/// recorded with its error and never stops the sweep.
pub fn grid_run<P: Problem + Sync>(spec: &GridSpec, problems: &[P], prompt: Option<&[TokenId]>) -> Result<GridOutput> {
    spec.validate()?;
    if problems.is_empty() {
        return Err(invalid("grid needs at least one problem"));
    }
    let jobs: Vec<(GenerationConfig, &P)> =
        spec.configs().into_iter().flat_map(|c| problems.iter().map(move |p| (c.clone(), p))).collect();
    let reports: Vec<RunReport> = jobs.par_iter().map(|(c, p)| run_problem(*p, prompt, c)).collect();
    let aggregates = aggregate(&reports)?;
    Ok(GridOutput { reports, aggregates })
}

type CellKey = (GuidanceKind, u64, u64);

/// Reduces reports to per-cell tables. The result depends only on the set
/// of reports, not their order.
///
/// Within a cell, Pass@k is computed per seed over that seed's problems and
/// then averaged over seeds. Failed reports are counted and left out.
pub fn aggregate(reports: &[RunReport]) -> Result<Aggregates> {
    // θ and α are non-negative, so their bit patterns sort numerically.
    let mut cells: BTreeMap<CellKey, BTreeMap<u64, Vec<&RunReport>>> = BTreeMap::new();
    for r in reports {
        if !(r.theta >= 0.0 && r.alpha >= 0.0) {
            return Err(invalid(format!("report {} has negative theta or alpha", r.file_name())));
        }
        cells.entry((r.guidance, r.theta.to_bits(), r.alpha.to_bits())).or_default().entry(r.seed).or_default().push(r);
    }

    let mut out = Aggregates::default();
    for ((guidance, theta, alpha), seeds) in cells {
        let (theta, alpha) = (f64::from_bits(theta), f64::from_bits(alpha));
        let mut runs = 0;
        let mut failed = 0;
        let mut per_seed: Vec<Vec<&RunReport>> = Vec::new();
        let mut diversities = Vec::new();
        for group in seeds.values() {
            runs += group.len();
            let mut ok: Vec<&RunReport> = group.iter().copied().filter(|r| r.succeeded()).collect();
            failed += group.len() - ok.len();
            ok.sort_by(|a, b| a.problem.cmp(&b.problem));
            diversities.extend(ok.iter().filter_map(|r| r.diversity));
            if !ok.is_empty() {
                per_seed.push(ok);
            }
        }
        let batch = per_seed.iter().flatten().map(|r| r.correct.len()).min().unwrap_or(0);
        let checked = !per_seed.is_empty() && per_seed.iter().flatten().all(|r| r.checked);
        let mut pass_at_1 = None;
        let mut pass_at_batch = None;
        if checked && batch > 0 {
            for k in 1..=batch {
                let values: Vec<f64> = per_seed
                    .iter()
                    .map(|group| pass_at_k(group, k))
                    .collect::<Result<_>>()?;
                let (mean, se) = mean_se(&values);
                if k == 1 {
                    pass_at_1 = Some(mean);
                }
                if k == batch {
                    pass_at_batch = Some(mean);
                }
                out.pass.push(PassRow { guidance, theta, alpha, k, mean, se, n: values.len() });
            }
        }
        let diversity = (!diversities.is_empty()).then(|| mean_se(&diversities).0);
        out.cells.push(CellSummary { guidance, theta, alpha, runs, failed, batch, pass_at_1, pass_at_batch, diversity });
    }
    Ok(out)
}

/// Mean and standard error (sample standard deviation over √n; 0 for n = 1).
fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
