//! JSON run configuration shared by every command.
//!
//! Scalar keys that a grid sweeps (`temperature`, `alpha`, `guidance`,
//! `seed`) accept either a value or a list. Single-run commands require
//! exactly one value.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dpp::DEFAULT_JITTER;
use crate::engine::{Denoiser, LogitsBatch, MaskState, SamplerSettings, Sequence, TokenId};
use crate::error::{Error, Result};
use crate::eval::GridSpec;
use crate::features::FeatureOptions;
use crate::gradcheck::GradcheckConfig;
use crate::guidance::{GenerationConfig, GuidanceConfig, GuidanceKind};
use crate::models::{bigram_train, BigramDenoiser, PlantedSuite, PlantedTask, Problem, ReplayDenoiser};
use crate::odd::{AnnealMode, DEFAULT_TOLERANCE};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "ODD_SEED";

const MAX_DEFAULT_STEPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }

    fn single(&self, key: &str) -> Result<T> {
        match self.values().as_slice() {
            [x] => Ok(x.clone()),
            xs => Err(Error::Config(format!(
                "'{key}' has {} values; single runs need exactly one (use the grid command to sweep)",
                xs.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    /// Generated planted problems.
    PlantedSuite {
        #[serde(flatten)]
        suite: PlantedSuite,
    },
    /// Explicit planted problems.
    Planted { problems: Vec<PlantedTask> },
    /// Bigram denoiser trained on a token corpus.
    Bigram { vocab: usize, corpus: Vec<Vec<TokenId>> },
    /// Logits replayed from an ODDT trace.
    Replay { path: PathBuf },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::PlantedSuite { suite: PlantedSuite::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvarianceConfig {
    pub m: usize,
    pub b1: usize,
    pub b2: usize,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self { m: 8, b1: 8, b2: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub repeats: usize,
    /// Forward passes per denoiser call, to emulate a costlier model.
    pub work: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { repeats: 3, work: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub task: TaskConfig,
    pub temperature: OneOrMany<f64>,
    /// Defaults to `min(length, 32)`.
    pub steps: Option<usize>,
    /// Defaults to the task's sequence length.
    pub length: Option<usize>,
    pub batch: Option<usize>,
    pub seed: OneOrMany<u64>,
    pub guidance: OneOrMany<GuidanceKind>,
    pub alpha: OneOrMany<f64>,
    pub tolerance: f64,
    pub jitter: f64,
    pub anneal: AnnealMode,
    pub top_k: Option<usize>,
    pub escape: bool,
    pub prompt: Option<Vec<TokenId>>,
    /// Problem index used by single-run commands.
    pub problem: usize,
    /// Optional path for recording the denoiser logits of a `generate` run.
    pub record: Option<PathBuf>,
    pub invariance: InvarianceConfig,
    pub profile: ProfileConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            task: TaskConfig::default(),
            temperature: OneOrMany::One(0.0),
            steps: None,
            length: None,
            batch: None,
            seed: OneOrMany::One(0),
            guidance: OneOrMany::One(GuidanceKind::None),
            alpha: OneOrMany::One(0.0),
            tolerance: DEFAULT_TOLERANCE,
            jitter: DEFAULT_JITTER,
            anneal: AnnealMode::Reciprocal,
            top_k: None,
            escape: true,
            prompt: None,
            problem: 0,
            record: None,
            invariance: InvarianceConfig::default(),
            profile: ProfileConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Reads `path` (or starts from defaults), then applies [`SEED_ENV`] and the
/// `KEY=VALUE` overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed_env: Option<&str>) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    if let Some(seed) = seed_env {
        let seed: u64 =
            seed.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
        doc["seed"] = Value::from(seed);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(task) = doc.get_mut("task").and_then(Value::as_object_mut) {
        task.entry("kind").or_insert_with(|| Value::from("planted_suite"));
    }
    let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Sets a dotted key. The value is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        if !slot.is_object() {
            return Err(Error::Config(format!("override {key:?} descends into a non-object")));
        }
        slot = slot
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = slot.as_object_mut().ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        for (key, n) in [
            ("temperature", self.temperature.values().len()),
            ("seed", self.seed.values().len()),
            ("guidance", self.guidance.values().len()),
            ("alpha", self.alpha.values().len()),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("'{key}' must not be an empty list")));
            }
        }
        Ok(())
    }

    fn guidance_config(&self, kind: GuidanceKind, alpha: f64) -> GuidanceConfig {
        GuidanceConfig {
            kind,
            alpha,
            tolerance: self.tolerance,
            jitter: self.jitter,
            anneal: self.anneal,
            features: FeatureOptions { top_k: self.top_k },
            escape: self.escape,
        }
    }

    fn sampler(&self, task: &LoadedTask, temperature: f64, seed: u64) -> SamplerSettings {
        let length = self.length.unwrap_or(task.length);
        SamplerSettings {
            temperature,
            steps: self.steps.or(task.steps).unwrap_or(length.min(MAX_DEFAULT_STEPS)),
            length,
            batch: self.batch.or(task.batch).unwrap_or(16),
            seed,
        }
    }

    /// The single generation config of a non-grid command.
    pub fn generation(&self, task: &LoadedTask) -> Result<GenerationConfig> {
        let config = GenerationConfig {
            sampler: self.sampler(task, self.temperature.single("temperature")?, self.seed.single("seed")?),
            guidance: self.guidance_config(self.guidance.single("guidance")?, self.alpha.single("alpha")?),
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    /// Generation config for one seed, with guidance and α fixed to single values.
    pub fn generation_for(&self, task: &LoadedTask, kind: GuidanceKind, seed: u64) -> Result<GenerationConfig> {
        let config = GenerationConfig {
            sampler: self.sampler(task, self.temperature.single("temperature")?, seed),
            guidance: self.guidance_config(kind, self.alpha.single("alpha")?),
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn grid_spec(&self, task: &LoadedTask) -> Result<GridSpec> {
        let base = GenerationConfig {
            sampler: self.sampler(task, 0.0, 0),
            guidance: self.guidance_config(GuidanceKind::None, 0.0),
        };
        let spec = GridSpec {
            temperatures: self.temperature.values(),
            alphas: self.alpha.values(),
            guidances: self.guidance.values(),
            seeds: self.seed.values(),
            base,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// A configured denoiser with an optional answer checker.
#[derive(Debug, Clone)]
pub enum TaskModel {
    Planted(PlantedTask),
    Bigram(BigramDenoiser),
    Replay(ReplayDenoiser),
}

impl Denoiser for TaskModel {
    fn vocab_size(&self) -> usize {
        match self {
            TaskModel::Planted(m) => m.vocab_size(),
            TaskModel::Bigram(m) => m.vocab_size(),
            TaskModel::Replay(m) => m.vocab_size(),
        }
    }

    fn predict(&self, state: &MaskState, step: usize) -> Result<LogitsBatch> {
        match self {
            TaskModel::Planted(m) => m.predict(state, step),
            TaskModel::Bigram(m) => m.predict(state, step),
            TaskModel::Replay(m) => m.predict(state, step),
        }
    }
}

impl Problem for TaskModel {
    fn id(&self) -> &str {
        match self {
            TaskModel::Planted(m) => m.id(),
            TaskModel::Bigram(m) => m.id(),
            TaskModel::Replay(m) => m.id(),
        }
    }

    fn check(&self, output: &Sequence) -> Option<bool> {
        match self {
            TaskModel::Planted(m) => m.check(output),
            TaskModel::Bigram(m) => m.check(output),
            TaskModel::Replay(m) => m.check(output),
        }
    }
}

/// Problems built from a [`TaskConfig`] plus the shape defaults they imply.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub problems: Vec<TaskModel>,
    pub length: usize,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
}

impl LoadedTask {
    pub fn is_replay(&self) -> bool {
        matches!(self.problems.first(), Some(TaskModel::Replay(_)))
    }

    pub fn problem(&self, index: usize) -> Result<&TaskModel> {
        self.problems
            .get(index)
            .ok_or_else(|| Error::Config(format!("problem {index} out of range ({} problems)", self.problems.len())))
    }
}

impl TaskConfig {
    /// Builds the problems. Malformed task definitions are config errors;
    /// unreadable traces are runtime errors.
    pub fn load(&self) -> Result<LoadedTask> {
        let cfg = |e: Error| Error::Config(e.to_string());
        match self {
            TaskConfig::PlantedSuite { suite } => {
                let problems = suite.build().map_err(cfg)?;
                Ok(LoadedTask {
                    problems: problems.into_iter().map(TaskModel::Planted).collect(),
                    length: suite.length,
                    steps: None,
                    batch: None,
                })
            }
            TaskConfig::Planted { problems } => {
                let first = problems.first().ok_or_else(|| Error::Config("planted task list is empty".into()))?;
                let length = first.length();
                let mut out = Vec::with_capacity(problems.len());
                for (k, p) in problems.iter().enumerate() {
                    p.validate().map_err(cfg)?;
                    if p.length() != length {
                        return Err(Error::Config("planted problems must share one sequence length".into()));
                    }
                    let mut p = p.clone();
                    if p.id.is_empty() {
                        p.id = format!("planted-{k:03}");
                    }
                    out.push(TaskModel::Planted(p));
                }
                Ok(LoadedTask { problems: out, length, steps: None, batch: None })
            }
            TaskConfig::Bigram { vocab, corpus } => {
                let seqs: Vec<Sequence> =
                    corpus.iter().map(|t| Sequence::new(t.clone(), *vocab)).collect::<Result<_>>().map_err(cfg)?;
                let length = corpus.iter().map(Vec::len).max().unwrap_or(0).max(1);
                let model = bigram_train(&seqs, *vocab).map_err(cfg)?;
                Ok(LoadedTask { problems: vec![TaskModel::Bigram(model)], length, steps: None, batch: None })
            }
            TaskConfig::Replay { path } => {
                let model = ReplayDenoiser::open(path)?;
                let t = model.trace();
                let (length, batch, steps) = (t.seq, t.batch, model.steps());
                Ok(LoadedTask {
                    problems: vec![TaskModel::Replay(model)],
                    length,
                    steps: Some(steps),
                    batch: Some(batch),
                })
            }
        }
    }
}
