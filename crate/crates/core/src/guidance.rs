//! Guidance selection and the engine-facing hook.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dpp::{dpp_step, DppParams, DEFAULT_JITTER};
use crate::engine::{
    generate_batch, Denoiser, Generation, GuidanceHook, LogitsBatch, MaskState, SamplerSettings, TokenId,
};
use crate::error::{invalid, Result};
use crate::features::FeatureOptions;
use crate::odd::{odd_step, AnnealMode, OddParams, DEFAULT_TOLERANCE};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    #[default]
    None,
    Odd,
    Dpp,
}

impl GuidanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceKind::None => "none",
            GuidanceKind::Odd => "odd",
            GuidanceKind::Dpp => "dpp",
        }
    }
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(GuidanceKind::None),
            "odd" => Ok(GuidanceKind::Odd),
            "dpp" => Ok(GuidanceKind::Dpp),
            other => Err(invalid(format!("unknown guidance '{other}' (expected none, odd or dpp)"))),
        }
    }
}

/// Guidance selector plus the parameters of every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub kind: GuidanceKind,
    pub alpha: f64,
    pub tolerance: f64,
    pub jitter: f64,
    pub anneal: AnnealMode,
    pub features: FeatureOptions,
    /// ODD only: steer exact duplicates apart (see [`crate::odd::escape_direction`]).
    pub escape: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            kind: GuidanceKind::None,
            alpha: 0.0,
            tolerance: DEFAULT_TOLERANCE,
            jitter: DEFAULT_JITTER,
            anneal: AnnealMode::Reciprocal,
            features: FeatureOptions::default(),
            escape: true,
        }
    }
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn odd(alpha: f64) -> Self {
        Self { kind: GuidanceKind::Odd, alpha, ..Self::default() }
    }

    pub fn dpp(alpha: f64) -> Self {
        Self { kind: GuidanceKind::Dpp, alpha, ..Self::default() }
    }

    pub fn odd_params(&self) -> OddParams {
        OddParams {
            alpha: self.alpha,
            tolerance: self.tolerance,
            anneal: self.anneal,
            features: self.features,
            escape: self.escape,
        }
    }

    pub fn dpp_params(&self) -> DppParams {
        DppParams { alpha: self.alpha, jitter: self.jitter, anneal: self.anneal, features: self.features }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            GuidanceKind::None => Ok(()),
            GuidanceKind::Odd => self.odd_params().validate(),
            GuidanceKind::Dpp => self.dpp_params().validate(),
        }
    }

    /// Hook for a run of `total_steps` reverse steps.
    pub fn hook(&self, total_steps: usize) -> Guidance {
        Guidance { config: *self, total_steps }
    }
}

/// Engine hook dispatching to the configured method.
#[derive(Debug, Clone)]
pub struct Guidance {
    config: GuidanceConfig,
    total_steps: usize,
}

impl GuidanceHook for Guidance {
    fn apply(&mut self, logits: LogitsBatch, mask: &MaskState, remaining: usize) -> Result<LogitsBatch> {
        match self.config.kind {
            GuidanceKind::None => Ok(logits),
            GuidanceKind::Odd => odd_step(&logits, mask, &self.config.odd_params(), remaining, self.total_steps),
            GuidanceKind::Dpp => dpp_step(&logits, mask, &self.config.dpp_params(), remaining, self.total_steps),
        }
    }
}

/// Sampler settings plus guidance: everything one generation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub sampler: SamplerSettings,
    pub guidance: GuidanceConfig,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.guidance.validate()
    }
}

/// Runs one guided generation.
pub fn generate<D: Denoiser + ?Sized>(
    model: &D,
    prompt: Option<&[TokenId]>,
    config: &GenerationConfig,
) -> Result<Generation> {
    config.validate()?;
    let mut hook = config.guidance.hook(config.sampler.steps);
    generate_batch(model, prompt, &config.sampler, &mut hook)
}
