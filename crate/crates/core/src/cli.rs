//! The `odd` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_config, LoadedTask, RunConfig, TaskModel, SEED_ENV};
use crate::engine::generate_batch_observed;
use crate::error::Error;
use crate::eval::{
    aggregate, grid_run, invariance_check, load_reports, overhead_profile, persist_reports, run_problem,
    write_artifacts, RunReport,
};
use crate::gradcheck::{run_all, Fault};
use crate::guidance::GuidanceKind;
use crate::models::{trace_write, CostlyDenoiser, TraceData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TEST_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "odd", version, about = "Diversity guidance for masked diffusion samplers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Override a config key, e.g. `--set alpha=16` or `--set task.problems=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Worker threads for grid cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one batch and print its outputs.
    Generate,
    /// Sweep temperature, step size, guidance and seed over every problem.
    Grid,
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Check that output prefixes do not depend on the batch size.
    Invariance,
    /// Run one batch against a recorded logits trace.
    Replay,
    /// Time guided against unguided generation.
    Profile,
    /// Rebuild tables and plots from persisted run reports.
    Report {
        /// Directory of reports; defaults to `<out>/reports`.
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    VjpSignFlip,
}

/// A failure that ends the process with a given exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Exit {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { EXIT_CONFIG } else { EXIT_RUNTIME };
        Exit::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Exit {
    fn from(e: std::io::Error) -> Self {
        Exit::new(EXIT_RUNTIME, e.to_string())
    }
}

type CliResult = Result<(), Exit>;

pub fn run(cli: Cli) -> CliResult {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Exit::new(EXIT_CONFIG, "--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, which leaves the old one in use.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    if let Command::Report { dir } = &cli.command {
        let dir = dir.clone().unwrap_or_else(|| cli.out.join("reports"));
        return report(&dir, &cli.out);
    }
    let seed_env = std::env::var(SEED_ENV).ok();
    let config = load_config(cli.config.as_deref(), &cli.overrides, seed_env.as_deref())?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("config.json"), serde_json::to_string_pretty(&config).map_err(Error::from)?)?;
    match &cli.command {
        Command::Generate => generate(&config, &cli.out, false),
        Command::Replay => generate(&config, &cli.out, true),
        Command::Grid => grid(&config, &cli.out),
        Command::Gradcheck { inject_fault } => {
            let fault = match inject_fault {
                Some(FaultArg::VjpSignFlip) => Fault::VjpSignFlip,
                None => Fault::None,
            };
            gradcheck(&config, fault)
        }
        Command::Invariance => invariance(&config, &cli.out),
        Command::Profile => profile(&config, &cli.out),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn format_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn generate(config: &RunConfig, out: &Path, replay: bool) -> CliResult {
    let task = config.task.load()?;
    if replay != task.is_replay() {
        let msg = if replay { "replay needs task.kind = \"replay\"" } else { "use the replay command for trace tasks" };
        return Err(Exit::new(EXIT_CONFIG, msg));
    }
    let problem = task.problem(config.problem)?;
    let gen = config.generation(&task)?;
    let prompt = config.prompt.as_deref();
    if let Some(path) = &config.record {
        record_trace(problem, prompt, &gen, path)?;
    }
    let report = run_problem(problem, prompt, &gen);
    if let Some(msg) = &report.failed {
        return Err(Exit::new(EXIT_RUNTIME, msg.clone()));
    }
    for (i, tokens) in report.outputs.iter().enumerate() {
        let verdict = if report.checked {
            if report.correct[i] {
                "  correct"
            } else {
                "  wrong"
            }
        } else {
            ""
        };
        println!("{i:>3}: {}{verdict}", format_tokens(tokens));
    }
    if let Some(d) = report.diversity {
        println!("diversity {d:.4}");
    }
    persist_reports(out.join("reports"), std::slice::from_ref(&report))?;
    Ok(())
}

fn record_trace(
    problem: &TaskModel,
    prompt: Option<&[u32]>,
    gen: &crate::guidance::GenerationConfig,
    path: &Path,
) -> CliResult {
    let s = &gen.sampler;
    let mut trace = TraceData::new(s.batch, s.length, crate::engine::Denoiser::vocab_size(problem));
    let mut hook = gen.guidance.hook(s.steps);
    generate_batch_observed(problem, prompt, s, &mut hook, |_, logits| trace.push_logits(logits))?;
    trace_write(path, &trace)?;
    Ok(())
}

fn grid(config: &RunConfig, out: &Path) -> CliResult {
    let task = config.task.load()?;
    let spec = config.grid_spec(&task)?;
    let output = grid_run(&spec, &task.problems, config.prompt.as_deref())?;
    persist_reports(out.join("reports"), &output.reports)?;
    write_artifacts(out, &output.aggregates)?;
    for c in &output.aggregates.cells {
        println!(
            "{:<4} theta={:<4} alpha={:<5} runs={} failed={} pass@1={} pass@{}={}",
            c.guidance.as_str(),
            c.theta,
            c.alpha,
            c.runs,
            c.failed,
            fmt_opt(c.pass_at_1),
            c.batch,
            fmt_opt(c.pass_at_batch),
        );
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn gradcheck(config: &RunConfig, fault: Fault) -> CliResult {
    let results = run_all(&config.gradcheck, fault)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<9} {} checked={} skipped={} worst_rel_err={:.3e} tol={:.0e}",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.checked,
            r.skipped,
            r.worst_error,
            r.tolerance
        );
        ok &= r.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Exit::new(EXIT_TEST_FAILURE, "gradient check failed"))
    }
}

fn invariance(config: &RunConfig, out: &Path) -> CliResult {
    let task = config.task.load()?;
    let problem = task.problem(config.problem)?;
    let inv = config.invariance;
    let mut rows = Vec::new();
    let mut broken = Vec::new();
    for kind in config.guidance.values() {
        for seed in config.seed.values() {
            let gen = config.generation_for(&task, kind, seed)?;
            let same = invariance_check(problem, config.prompt.as_deref(), &gen, inv.m, inv.b1, inv.b2)?;
            println!("{:<4} seed={seed:<4} {}", kind.as_str(), if same { "invariant" } else { "differs" });
            // Only the sequential methods promise invariance.
            if !same && kind != GuidanceKind::Dpp {
                broken.push(format!("{kind}/{seed}"));
            }
            rows.push(serde_json::json!({ "guidance": kind, "seed": seed, "invariant": same }));
        }
    }
    fs::write(out.join("invariance.json"), serde_json::to_string_pretty(&rows).map_err(Error::from)?)?;
    if broken.is_empty() {
        Ok(())
    } else {
        Err(Exit::new(EXIT_TEST_FAILURE, format!("prefix outputs changed with batch size for {}", broken.join(", "))))
    }
}

fn profile(config: &RunConfig, out: &Path) -> CliResult {
    let task: LoadedTask = config.task.load()?;
    let problem = task.problem(config.problem)?;
    let gen = config.generation(&task)?;
    let model = CostlyDenoiser::new(problem, config.profile.work);
    let report = overhead_profile(&model, config.prompt.as_deref(), &gen, config.profile.repeats)?;
    println!(
        "guided {:.6}s baseline {:.6}s hook {:.6}s overhead {:.1}%",
        report.guided_seconds,
        report.baseline_seconds,
        report.hook_seconds,
        100.0 * report.overhead_fraction
    );
    fs::write(out.join("profile.json"), serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    Ok(())
}

fn report(dir: &Path, out: &Path) -> CliResult {
    if !dir.is_dir() {
        return Err(Exit::new(EXIT_CONFIG, format!("{} is not a directory", dir.display())));
    }
    let (reports, warnings): (Vec<RunReport>, Vec<String>) = load_reports(dir)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if reports.is_empty() {
        return Err(Exit::new(EXIT_CONFIG, format!("no run reports in {}", dir.display())));
    }
    let aggregates = aggregate(&reports)?;
    let files = write_artifacts(out, &aggregates)?;
    println!("{} reports, {} files written to {}", reports.len(), files.len(), out.display());
    Ok(())
}
