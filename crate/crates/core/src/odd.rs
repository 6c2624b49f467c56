//! Orthogonal diverse diffusion (ODD).
//!
//! Samples are visited in batch order. Sample `i` is scored by the norm of
//! the part of its feature vector that lies outside the span of samples
//! `1..i`, weighted by its quality, and its logits are moved along the
//! gradient that grows that orthogonal residual. The history basis and the
//! projections are constants during differentiation, so sample `i`'s update
//! depends only on samples `1..=i` and never on the batch size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{LogitsBatch, MaskState};
use crate::error::{invalid, Error, Result};
use crate::features::{backprop_with, feature_gram_apply, featurize, FeatureOptions, FeatureSet, UnifiedDistribution, VjpFn};
use crate::tensor::{dot, norm, softmax_vjp};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;

const ESCAPE_SEED: u64 = 0x0DD;
const ESCAPE_MAX_ITERS: usize = 200;
const ESCAPE_CONVERGED: f64 = 1e-10;
/// Escape directions whose feature sensitivity is below this are dropped.
const ESCAPE_MIN_GAIN: f64 = 1e-14;

/// Ordered orthonormal basis over feature space.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    dim: usize,
    tolerance: f64,
    vectors: Vec<Vec<f64>>,
}

impl OrthoBasis {
    pub fn new(dim: usize, tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0) || !tolerance.is_finite() {
            return Err(invalid(format!("basis tolerance must be positive, got {tolerance}")));
        }
        Ok(Self { dim, tolerance, vectors: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// `Σ_j (v·b_j) b_j`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(invalid(format!("vector of length {} against basis of dimension {}", v.len(), self.dim)));
        }
        let mut p = vec![0.0; self.dim];
        for b in &self.vectors {
            let c = dot(v, b);
            for (pk, bk) in p.iter_mut().zip(b) {
                *pk += c * bk;
            }
        }
        Ok(p)
    }

    /// `v − proj(v)`.
    pub fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let p = self.project(v)?;
        Ok(v.iter().zip(&p).map(|(a, b)| a - b).collect())
    }

    /// Appends the normalized residual of `v` when its norm exceeds the
    /// tolerance. Returns whether the basis grew.
    pub fn extend(&mut self, v: &[f64]) -> Result<bool> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("cannot extend basis with a non-finite vector"));
        }
        let r = self.residual(v)?;
        let n = norm(&r);
        if n <= self.tolerance {
            return Ok(false);
        }
        // A second pass restores orthogonality lost to cancellation.
        let mut r = self.residual(&r)?;
        let n2 = norm(&r);
        if n2 <= self.tolerance {
            return Ok(false);
        }
        r.iter_mut().for_each(|x| *x /= n2);
        self.vectors.push(r);
        Ok(true)
    }

    /// Max deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, a) in self.vectors.iter().enumerate() {
            for (k, b) in self.vectors.iter().enumerate() {
                let target = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }
}

/// Free-function form of [`OrthoBasis::project`].
pub fn project_onto_basis(basis: &OrthoBasis, v: &[f64]) -> Result<Vec<f64>> {
    basis.project(v)
}

/// Free-function form of [`OrthoBasis::extend`].
pub fn extend_basis(basis: &mut OrthoBasis, v: &[f64]) -> Result<bool> {
    basis.extend(v)
}

/// Step-size annealing over the reverse process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealMode {
    /// `α_t = (1 − 1/t)·α` with `t` the remaining-step count.
    #[default]
    Reciprocal,
    /// `α_t = α·(t − 1)/(T − 1)`: a straight ramp from `α` at the first step to 0 at the last.
    Linear,
    /// Constant `α`.
    Off,
}

impl AnnealMode {
    /// Step size with `remaining` steps left out of `total`.
    pub fn alpha_at(self, alpha: f64, remaining: usize, total: usize) -> Result<f64> {
        match self {
            AnnealMode::Reciprocal => anneal_alpha(alpha, remaining),
            AnnealMode::Linear => {
                if remaining < 1 || remaining > total {
                    return Err(invalid(format!("remaining step {remaining} outside [1, {total}]")));
                }
                if total == 1 {
                    return Ok(0.0);
                }
                Ok(alpha * (remaining - 1) as f64 / (total - 1) as f64)
            }
            AnnealMode::Off => Ok(alpha),
        }
    }
}

/// `(1 − 1/t)·α` for `t ≥ 1` remaining steps.
pub fn anneal_alpha(alpha: f64, t: usize) -> Result<f64> {
    if t < 1 {
        return Err(invalid("annealing needs at least one remaining step"));
    }
    Ok((1.0 - 1.0 / t as f64) * alpha)
}

/// ODD step parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddParams {
    pub alpha: f64,
    pub tolerance: f64,
    pub anneal: AnnealMode,
    #[serde(default)]
    pub features: FeatureOptions,
    /// Give exact duplicates of earlier samples an escape direction instead
    /// of a zero gradient (see [`escape_direction`]).
    #[serde(default = "default_escape")]
    pub escape: bool,
}

fn default_escape() -> bool {
    true
}

impl Default for OddParams {
    fn default() -> Self {
        Self {
            alpha: 16.0,
            tolerance: DEFAULT_TOLERANCE,
            anneal: AnnealMode::Reciprocal,
            features: FeatureOptions::default(),
            escape: true,
        }
    }
}

impl OddParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// Orthogonal-residual term for one sample after the first.
#[derive(Debug, Clone)]
pub struct OrthTerm {
    pub sample: usize,
    /// `−q·‖v − p‖`.
    pub loss: f64,
    pub residual_norm: f64,
    /// Unit residual direction, absent when the residual is within tolerance.
    pub direction: Option<Vec<f64>>,
    /// Escape direction used in place of `direction` for a duplicate sample.
    pub escape: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct OddLosses {
    pub terms: Vec<OrthTerm>,
    pub basis: OrthoBasis,
}

impl OddLosses {
    pub fn total(&self) -> f64 {
        self.terms.iter().map(|t| t.loss).sum()
    }
}

/// Sequential Gram-Schmidt pass over the batch features.
pub fn odd_losses(fs: &FeatureSet, tolerance: f64) -> Result<OddLosses> {
    if fs.batch() == 0 {
        return Err(invalid("empty batch"));
    }
    let mut basis = OrthoBasis::new(fs.vocab(), tolerance)?;
    let first = fs.feature(0);
    if norm(first) <= tolerance {
        return Err(Error::Degenerate("first feature vector has (near-)zero norm".into()));
    }
    basis.extend(first)?;

    let mut terms = Vec::with_capacity(fs.batch() - 1);
    for i in 1..fs.batch() {
        let v = fs.feature(i);
        let r = basis.residual(v)?;
        let rn = norm(&r);
        let direction = (rn > tolerance).then(|| r.iter().map(|x| x / rn).collect());
        terms.push(OrthTerm { sample: i, loss: -fs.quality(i) * rn, residual_norm: rn, direction, escape: None });
        basis.extend(v)?;
    }
    Ok(OddLosses { terms, basis })
}

/// Gradient of the summed ODD loss with respect to the logits.
pub fn odd_gradient(logits: &LogitsBatch, mask: &MaskState, params: &OddParams) -> Result<(LogitsBatch, OddLosses)> {
    odd_gradient_with(logits, mask, params, softmax_vjp)
}

pub(crate) fn odd_gradient_with(
    logits: &LogitsBatch,
    mask: &MaskState,
    params: &OddParams,
    vjp: VjpFn,
) -> Result<(LogitsBatch, OddLosses)> {
    let (p, fs) = featurize(logits, mask, params.features)?;
    let mut losses = odd_losses(&fs, params.tolerance)?;
    if params.escape {
        assign_escapes(&mut losses, &fs, &p, params.tolerance)?;
    }
    let vocab = fs.vocab();
    let mut upstream = vec![0.0; fs.batch() * vocab];
    for term in &losses.terms {
        if let Some(d) = term.direction.as_ref().or(term.escape.as_ref()) {
            let q = fs.quality(term.sample);
            for (u, dk) in upstream[term.sample * vocab..(term.sample + 1) * vocab].iter_mut().zip(d) {
                *u = -q * dk;
            }
        }
    }
    let grad = backprop_with(&upstream, &fs, &p, vjp)?;
    Ok((grad, losses))
}

/// Duplicates of earlier samples have no residual, so the loss gives them
/// nothing to follow. Each one instead takes the direction orthogonal to the
/// history basis along which its features respond most strongly to its
/// logits. Duplicates therefore move together along a dominant direction and
/// only spread out where several directions respond equally.
fn assign_escapes(losses: &mut OddLosses, fs: &FeatureSet, p: &UnifiedDistribution, tolerance: f64) -> Result<()> {
    if losses.terms.iter().all(|t| t.direction.is_some()) {
        return Ok(());
    }
    // Rebuild the basis as it stood before each sample, so later samples
    // cannot influence earlier ones.
    let mut history = OrthoBasis::new(fs.vocab(), tolerance)?;
    history.extend(fs.feature(0))?;
    for term in losses.terms.iter_mut() {
        if term.direction.is_none() {
            term.escape = escape_direction(&history, fs, p, term.sample);
        }
        history.extend(fs.feature(term.sample))?;
    }
    Ok(())
}

/// Top eigenvector of `Π J Jᵀ Π` for sample `i`, where `J` is the Jacobian of
/// its features with respect to its logits and `Π` projects out the basis.
/// Power iteration starts from a vector fixed by `i`, which decides the
/// outcome inside degenerate eigenspaces. The sign is chosen so that the
/// features with the most headroom (`1 − v`) grow.
pub fn escape_direction(basis: &OrthoBasis, fs: &FeatureSet, p: &UnifiedDistribution, i: usize) -> Option<Vec<f64>> {
    let vocab = fs.vocab();
    let deflate = |x: &mut Vec<f64>| {
        for _ in 0..2 {
            for b in basis.vectors() {
                let c = dot(x, b);
                x.iter_mut().zip(b).for_each(|(xk, bk)| *xk -= c * bk);
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ESCAPE_SEED);
    rng.set_stream(i as u64);
    let mut x: Vec<f64> = (0..vocab).map(|_| rng.random_range(-1.0..1.0)).collect();
    deflate(&mut x);
    let n = norm(&x);
    if !(n > 0.0) {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= n);

    let mut gain = 0.0;
    for _ in 0..ESCAPE_MAX_ITERS {
        let mut y = feature_gram_apply(fs, p, i, &x);
        deflate(&mut y);
        gain = norm(&y);
        if !(gain > ESCAPE_MIN_GAIN) {
            return None;
        }
        y.iter_mut().for_each(|v| *v /= gain);
        let change: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = y;
        if change < ESCAPE_CONVERGED {
            break;
        }
    }
    if !(gain > ESCAPE_MIN_GAIN) {
        return None;
    }
    let headroom: f64 = x.iter().zip(fs.feature(i)).map(|(d, v)| d * (1.0 - v)).sum();
    if headroom < 0.0 {
        x.iter_mut().for_each(|v| *v = -*v);
    }
    Some(x)
}

/// One ODD logits update: `X − α_t·∇_X L`.
///
/// `remaining` is the number of reverse steps left (T down to 1) and `total`
/// is T. Samples with no gradient are returned bit-identical.
pub fn odd_step(
    logits: &LogitsBatch,
    mask: &MaskState,
    params: &OddParams,
    remaining: usize,
    total: usize,
) -> Result<LogitsBatch> {
    params.validate()?;
    let alpha_t = params.anneal.alpha_at(params.alpha, remaining, total)?;
    if alpha_t == 0.0 || logits.batch() < 2 {
        return Ok(logits.clone());
    }
    let (grad, _) = odd_gradient(logits, mask, params)?;
    Ok(apply_update(logits, &grad, alpha_t))
}

/// `x − α·g`, touching only entries with a nonzero gradient.
pub(crate) fn apply_update(logits: &LogitsBatch, grad: &LogitsBatch, alpha: f64) -> LogitsBatch {
    let mut out = logits.clone();
    for (x, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        if g != 0.0 {
            *x -= alpha * g;
        }
    }
    out
}
