//! Evaluation harness: run records, Pass@k and diversity statistics, grid
//! sweeps, batch-size invariance and overhead measurements.

mod grid;
mod metrics;
mod plots;

pub use grid::{aggregate, grid_run, Aggregates, CellSummary, GridOutput, GridSpec, PassRow};
pub use metrics::{distinct_outputs, pairwise_diversity, pass_at_k, token_diversity, union_coverage, vector_diversity};
pub use plots::{cells_csv, pareto_svg, pass_at_k_svg, pass_csv, write_artifacts};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Denoiser, LogitsBatch, TokenId};
use crate::error::{invalid, Result};
use crate::features::{featurize, FeatureOptions};
use crate::guidance::{generate, GenerationConfig, GuidanceConfig, GuidanceKind};
use crate::models::Problem;

/// Everything recorded about one generation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: String,
    pub guidance: GuidanceKind,
    pub theta: f64,
    pub alpha: f64,
    pub seed: u64,
    pub outputs: Vec<Vec<TokenId>>,
    /// One flag per output; all false when the problem has no checker.
    pub correct: Vec<bool>,
    pub checked: bool,
    /// Wall time inside the guidance hook, one entry per step.
    pub guidance_seconds: Vec<f64>,
    pub total_seconds: f64,
    /// Max-pooled features of the finished outputs.
    pub final_features: Vec<Vec<f64>>,
    pub diversity: Option<f64>,
    /// Error message when the run failed; such reports carry no outputs.
    pub failed: Option<String>,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.failed.is_none()
    }

    /// Unique, filesystem-safe file name for this run.
    pub fn file_name(&self) -> String {
        let problem: String =
            self.problem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        format!("{}_t{}_a{}_s{}_{}.json", self.guidance, self.theta, self.alpha, self.seed, problem)
    }
}

/// Runs one generation and records it. Errors are captured in the report.
pub fn run_problem<P: Problem + ?Sized>(
    problem: &P,
    prompt: Option<&[TokenId]>,
    config: &GenerationConfig,
) -> RunReport {
    let mut report = RunReport {
        problem: problem.id().to_string(),
        guidance: config.guidance.kind,
        theta: config.sampler.temperature,
        alpha: config.guidance.alpha,
        seed: config.sampler.seed,
        ..RunReport::default()
    };
    if let Err(e) = fill_report(problem, prompt, config, &mut report) {
        report.outputs.clear();
        report.correct.clear();
        report.final_features.clear();
        report.diversity = None;
        report.failed = Some(e.to_string());
    }
    report
}

fn fill_report<P: Problem + ?Sized>(
    problem: &P,
    prompt: Option<&[TokenId]>,
    config: &GenerationConfig,
    report: &mut RunReport,
) -> Result<()> {
    let generation = generate(problem, prompt, config)?;
    let checks: Vec<Option<bool>> = generation.sequences.iter().map(|s| problem.check(s)).collect();
    report.checked = checks.iter().all(Option::is_some);
    report.correct = checks.iter().map(|c| c.unwrap_or(false)).collect();
    report.outputs = generation.sequences.iter().map(|s| s.tokens.clone()).collect();
    report.guidance_seconds = generation.guidance_time.iter().map(|d| d.as_secs_f64()).collect();
    report.total_seconds = generation.total_time.as_secs_f64();
    // Every position is committed, so the logits do not affect the features.
    let state = &generation.final_state;
    let zeros = LogitsBatch::zeros(state.batch(), state.seq(), state.vocab());
    let (_, fs) = featurize(&zeros, state, FeatureOptions::default())?;
    report.final_features = (0..fs.batch()).map(|i| fs.feature(i).to_vec()).collect();
    report.diversity = if report.outputs.len() >= 2 { Some(pairwise_diversity(&generation.sequences)?) } else { None };
    Ok(())
}

/// Writes one JSON document per report into `dir`, returning the paths.
pub fn persist_reports(dir: impl AsRef<Path>, reports: &[RunReport]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    reports
        .iter()
        .map(|r| {
            let path = dir.join(r.file_name());
            fs::write(&path, serde_json::to_string_pretty(r)?)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.json` report in `dir` (sorted by file name). Files that do
/// not parse as reports are skipped and described in the returned warnings.
pub fn load_reports(dir: impl AsRef<Path>) -> Result<(Vec<RunReport>, Vec<String>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str::<RunReport>(&text).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => reports.push(r),
            Err(e) => warnings.push(format!("skipping {}: {e}", path.display())),
        }
    }
    Ok((reports, warnings))
}

/// Whether the first `m` outputs of runs at batch sizes `b1` and `b2` agree
/// token for token, with everything else in `config` unchanged.
pub fn invariance_check<D: Denoiser + ?Sized>(
    model: &D,
    prompt: Option<&[TokenId]>,
    config: &GenerationConfig,
    m: usize,
    b1: usize,
    b2: usize,
) -> Result<bool> {
    if !(m <= b1 && b1 < b2) {
        return Err(invalid(format!("need m <= b1 < b2, got m={m}, b1={b1}, b2={b2}")));
    }
    let run = |b: usize| {
        let mut c = config.clone();
        c.sampler.batch = b;
        generate(model, prompt, &c)
    };
    let small = run(b1)?;
    let large = run(b2)?;
    Ok(small.sequences[..m] == large.sequences[..m])
}

/// Timing of guided against unguided generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    /// Mean seconds per guided batch.
    pub guided_seconds: f64,
    /// Mean seconds per unguided batch with the same seed.
    pub baseline_seconds: f64,
    /// `(guided − baseline) / baseline`; 0 when no guidance is active.
    pub overhead_fraction: f64,
    /// Mean seconds per batch spent inside the guidance hook.
    pub hook_seconds: f64,
    pub repeats: usize,
}

/// Times `repeats` guided and unguided batches, interleaved.
pub fn overhead_profile<D: Denoiser + ?Sized>(
    model: &D,
    prompt: Option<&[TokenId]>,
    config: &GenerationConfig,
    repeats: usize,
) -> Result<OverheadReport> {
    if repeats == 0 {
        return Err(invalid("profiling needs at least one repeat"));
    }
    let baseline_config = GenerationConfig { sampler: config.sampler.clone(), guidance: GuidanceConfig::none() };
    let (mut guided, mut baseline, mut hook) = (0.0, 0.0, 0.0);
    for _ in 0..repeats {
        let g = generate(model, prompt, config)?;
        guided += g.total_time.as_secs_f64();
        hook += g.guidance_time.iter().map(|d| d.as_secs_f64()).sum::<f64>();
        baseline += generate(model, prompt, &baseline_config)?.total_time.as_secs_f64();
    }
    let n = repeats as f64;
    let (guided, baseline, hook) = (guided / n, baseline / n, hook / n);
    let inactive = config.guidance.kind == GuidanceKind::None || config.guidance.alpha == 0.0;
    let overhead_fraction = if inactive { 0.0 } else { (guided - baseline) / baseline };
    Ok(OverheadReport { guided_seconds: guided, baseline_seconds: baseline, overhead_fraction, hook_seconds: hook, repeats })
}
