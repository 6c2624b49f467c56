//! Planted multi-template task.
//!
//! A problem is a handful of fixed token sequences ("templates"), some of
//! which count as correct answers. The denoiser is the exact posterior
//! predictive of a mixture over templates: committed tokens rule out the
//! templates they contradict, and every masked position gets the
//! posterior-weighted mix of template tokens plus a small noise floor.
//! Template 0 carries most of the prior mass, so greedy decoding collapses
//! onto it.
//!
//! [`PlantedSuite`] builds problems whose templates share a random body and
//! differ at two branch positions: the first separates template 0 from all
//! the others, the second tells the others apart.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Denoiser, LogitsBatch, MaskState, Sequence, TokenId};
use crate::error::{invalid, Result};

pub const DEFAULT_SKEW: f64 = 0.85;
pub const DEFAULT_NOISE_FLOOR: f64 = 1e-3;

const MIN_MASS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTask {
    #[serde(default)]
    pub id: String,
    pub vocab: usize,
    pub templates: Vec<Vec<TokenId>>,
    /// Indices into `templates` of the correct answers.
    pub correct: Vec<usize>,
    #[serde(default = "default_skew")]
    pub skew: f64,
    #[serde(default = "default_noise")]
    pub noise_floor: f64,
}

fn default_skew() -> f64 {
    DEFAULT_SKEW
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_FLOOR
}

impl PlantedTask {
    pub fn new(
        id: impl Into<String>,
        vocab: usize,
        templates: Vec<Vec<TokenId>>,
        correct: Vec<usize>,
        skew: f64,
        noise_floor: f64,
    ) -> Result<Self> {
        let task = Self { id: id.into(), vocab, templates, correct, skew, noise_floor };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.templates.len();
        if m < 2 {
            return Err(invalid("a planted task needs at least two templates"));
        }
        let len = self.templates[0].len();
        if len == 0 || self.templates.iter().any(|t| t.len() != len) {
            return Err(invalid("templates must be non-empty and share one length"));
        }
        if self.templates.iter().flatten().any(|&t| t as usize >= self.vocab) {
            return Err(invalid(format!("template token outside vocabulary of {}", self.vocab)));
        }
        for a in 0..m {
            for b in (a + 1)..m {
                if self.templates[a] == self.templates[b] {
                    return Err(invalid(format!("templates {a} and {b} are identical")));
                }
            }
        }
        if self.correct.is_empty() || self.correct.iter().any(|&c| c >= m) {
            return Err(invalid("correct set must be a non-empty subset of template indices"));
        }
        if !(self.skew > 0.0 && self.skew <= 1.0) {
            return Err(invalid(format!("skew must lie in (0, 1], got {}", self.skew)));
        }
        if !(0.0..1.0).contains(&self.noise_floor) {
            return Err(invalid(format!("noise floor must lie in [0, 1), got {}", self.noise_floor)));
        }
        Ok(())
    }

    pub fn length(&self) -> usize {
        self.templates[0].len()
    }

    /// Prior mass: `skew` on template 0, the rest shared evenly.
    pub fn prior(&self) -> Vec<f64> {
        let m = self.templates.len();
        let rest = (1.0 - self.skew) / (m - 1) as f64;
        (0..m).map(|k| if k == 0 { self.skew } else { rest }).collect()
    }

    /// Posterior over templates given a sample's committed tokens.
    ///
    /// Contradicted templates get zero weight. If every template is
    /// contradicted, each mismatch is instead charged a factor of the noise
    /// floor, so the closest templates win.
    pub fn posterior(&self, tokens: &[TokenId], masked: &[bool]) -> Vec<f64> {
        let prior = self.prior();
        let mismatches: Vec<usize> = self
            .templates
            .iter()
            .map(|tpl| {
                tokens
                    .iter()
                    .zip(masked)
                    .zip(tpl)
                    .filter(|((&tok, &m), &t)| !m && tok != t)
                    .count()
            })
            .collect();
        let mut w: Vec<f64> =
            prior.iter().zip(&mismatches).map(|(&p, &n)| if n == 0 { p } else { 0.0 }).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
            return w;
        }
        let penalty = self.noise_floor.max(f64::MIN_POSITIVE).ln();
        let logw: Vec<f64> = prior
            .iter()
            .zip(&mismatches)
            .map(|(&p, &n)| if p > 0.0 { p.ln() + n as f64 * penalty } else { f64::NEG_INFINITY })
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logw.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        w
    }

    fn predict_sample(&self, tokens: &[TokenId], masked: &[bool], out: &mut [f64]) {
        let vocab = self.vocab;
        let post = self.posterior(tokens, masked);
        let floor = self.noise_floor / vocab as f64;
        for (s, row) in out.chunks_exact_mut(vocab).enumerate() {
            row.iter_mut().for_each(|x| *x = floor);
            for (tpl, &w) in self.templates.iter().zip(&post) {
                row[tpl[s] as usize] += (1.0 - self.noise_floor) * w;
            }
            for x in row.iter_mut() {
                // Zero mass (noise floor 0) maps to a large finite negative logit.
                *x = x.max(MIN_MASS).ln();
            }
        }
    }

    /// Exact match against a correct template.
    pub fn check_answer(&self, output: &Sequence) -> bool {
        self.is_correct(&output.tokens)
    }

    pub fn is_correct(&self, tokens: &[TokenId]) -> bool {
        self.correct.iter().any(|&c| self.templates[c] == tokens)
    }

    /// Which template, if any, a finished output reproduces.
    pub fn template_index(&self, tokens: &[TokenId]) -> Option<usize> {
        self.templates.iter().position(|t| t == tokens)
    }
}

impl Denoiser for PlantedTask {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn predict(&self, state: &MaskState, _step: usize) -> Result<LogitsBatch> {
        if state.vocab() != self.vocab || state.seq() != self.length() {
            return Err(invalid(format!(
                "state (S={}, V={}) does not match task (S={}, V={})",
                state.seq(),
                state.vocab(),
                self.length(),
                self.vocab
            )));
        }
        let mut logits = LogitsBatch::zeros(state.batch(), state.seq(), self.vocab);
        for i in 0..state.batch() {
            self.predict_sample(state.tokens(i), state.masked_flags(i), logits.sample_mut(i));
        }
        Ok(logits)
    }
}

/// Free-function form of the denoiser call.
pub fn planted_predict(task: &PlantedTask, state: &MaskState) -> Result<LogitsBatch> {
    task.predict(state, 0)
}

/// Free-function form of [`PlantedTask::check_answer`].
pub fn check_answer(task: &PlantedTask, output: &Sequence) -> bool {
    task.check_answer(output)
}

/// Generator for a family of planted problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSuite {
    pub problems: usize,
    pub vocab: usize,
    pub length: usize,
    pub templates: usize,
    pub correct: usize,
    pub skew: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for PlantedSuite {
    fn default() -> Self {
        Self {
            problems: 50,
            vocab: 32,
            length: 16,
            templates: 8,
            correct: 2,
            skew: DEFAULT_SKEW,
            noise_floor: DEFAULT_NOISE_FLOOR,
            seed: 2024,
        }
    }
}

impl PlantedSuite {
    /// Builds every problem. Template 0 is never correct; the correct
    /// templates are drawn from the rest.
    pub fn build(&self) -> Result<Vec<PlantedTask>> {
        if self.templates < 2 || self.correct == 0 || self.correct >= self.templates {
            return Err(invalid("need at least two templates and 1..templates-1 correct ones"));
        }
        if self.length < 2 {
            return Err(invalid("suite sequences need at least two positions"));
        }
        // Branch tokens (two at the first branch, one per template at the
        // second) are kept out of the body, which needs at least one token.
        if self.vocab < self.templates + 3 {
            return Err(invalid(format!(
                "vocabulary of {} is too small for {} templates (need at least {})",
                self.vocab,
                self.templates,
                self.templates + 3
            )));
        }
        (0..self.problems).map(|p| self.build_one(p)).collect()
    }

    fn build_one(&self, index: usize) -> Result<PlantedTask> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let mut tokens: Vec<TokenId> = (0..self.vocab as TokenId).collect();
        tokens.shuffle(&mut rng);
        let (branch, body_tokens) = tokens.split_at(self.templates + 2);
        let body: Vec<TokenId> =
            (0..self.length).map(|_| body_tokens[rng.random_range(0..body_tokens.len())]).collect();
        let mut positions: Vec<usize> = (0..self.length).collect();
        positions.shuffle(&mut rng);
        let (first, second) = (positions[0], positions[1]);

        let templates = (0..self.templates)
            .map(|m| {
                let mut t = body.clone();
                t[first] = if m == 0 { branch[0] } else { branch[1] };
                t[second] = branch[2 + m];
                t
            })
            .collect();
        let mut others: Vec<usize> = (1..self.templates).collect();
        others.shuffle(&mut rng);
        let mut correct = others[..self.correct].to_vec();
        correct.sort_unstable();
        PlantedTask::new(format!("planted-{index:03}"), self.vocab, templates, correct, self.skew, self.noise_floor)
    }
}
