//! Joint-batch DPP guidance (DiverseFlow-style baseline).
//!
//! Features are L2-normalized, their Gram matrix is weighted by the quality
//! outer product to form an L-ensemble, and the loss is the negative
//! log-likelihood `−(log det(L + εI) − log det(L + (1+ε)I))`. Unlike ODD
//! every sample's update depends on the whole batch.

use serde::{Deserialize, Serialize};

use crate::engine::{LogitsBatch, MaskState};
use crate::error::{invalid, Error, Result};
use crate::features::{backprop_with, featurize, FeatureOptions, FeatureSet, VjpFn};
use crate::odd::{apply_update, AnnealMode};
use crate::tensor::{norm, softmax_vjp, Cholesky, Matrix};

pub const DEFAULT_JITTER: f64 = 1e-3;

/// Extra diagonal added (as a multiple of ε) when the first factorization fails.
const RETRY_JITTER_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DppParams {
    pub alpha: f64,
    pub jitter: f64,
    pub anneal: AnnealMode,
    #[serde(default)]
    pub features: FeatureOptions,
}

impl Default for DppParams {
    fn default() -> Self {
        Self { alpha: 16.0, jitter: DEFAULT_JITTER, anneal: AnnealMode::Reciprocal, features: FeatureOptions::default() }
    }
}

impl DppParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.jitter > 0.0) || !self.jitter.is_finite() {
            return Err(invalid(format!("jitter must be positive, got {}", self.jitter)));
        }
        Ok(())
    }
}

/// Row-normalized features of a batch.
fn normalized_features(fs: &FeatureSet) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rows = Vec::with_capacity(fs.batch());
    let mut norms = Vec::with_capacity(fs.batch());
    for i in 0..fs.batch() {
        let v = fs.feature(i);
        let n = norm(v);
        if !(n > 0.0) {
            return Err(Error::Degenerate(format!("feature vector of sample {i} has zero norm")));
        }
        rows.push(v.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok((rows, norms))
}

/// `L = (N Nᵀ) ⊙ (q qᵀ)` with `N` the row-normalized features.
pub fn build_l_ensemble(fs: &FeatureSet) -> Result<Matrix> {
    if fs.batch() == 0 {
        return Err(invalid("empty batch"));
    }
    let (rows, _) = normalized_features(fs)?;
    Ok(l_from_normalized(&rows, fs.qualities()))
}

fn l_from_normalized(rows: &[Vec<f64>], q: &[f64]) -> Matrix {
    let b = rows.len();
    let mut l = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i..b {
            let k: f64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| x * y).sum();
            let v = k * q[i] * q[j];
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    l
}

/// Factors `l + shift·I`, retrying once with `RETRY_JITTER_FACTOR·jitter` more on the diagonal.
fn factor_with_retry(l: &Matrix, shift: f64, jitter: f64) -> Result<Cholesky> {
    match Cholesky::factor(&l.add_diagonal(shift)) {
        Ok(c) => Ok(c),
        Err(Error::NotPositiveDefinite { .. }) => {
            Cholesky::factor(&l.add_diagonal(shift + RETRY_JITTER_FACTOR * jitter)).map_err(|e| {
                Error::Numerical(format!("L-ensemble factorization failed after jitter retry: {e}"))
            })
        }
        Err(e) => Err(e),
    }
}

/// `−(log det(L + εI) − log det(L + (1+ε)I))`.
pub fn dpp_loss(l: &Matrix, jitter: f64) -> Result<f64> {
    if !(jitter > 0.0) {
        return Err(invalid(format!("jitter must be positive, got {jitter}")));
    }
    let a = factor_with_retry(l, jitter, jitter)?;
    let c = factor_with_retry(l, 1.0 + jitter, jitter)?;
    Ok(-(a.log_det() - c.log_det()))
}

/// Gradient of the DPP loss with respect to the logits, with qualities held constant.
pub fn dpp_grad_logits(logits: &LogitsBatch, mask: &MaskState, params: &DppParams) -> Result<(LogitsBatch, f64)> {
    dpp_grad_with(logits, mask, params, softmax_vjp)
}

pub(crate) fn dpp_grad_with(
    logits: &LogitsBatch,
    mask: &MaskState,
    params: &DppParams,
    vjp: VjpFn,
) -> Result<(LogitsBatch, f64)> {
    let (p, fs) = featurize(logits, mask, params.features)?;
    let (rows, norms) = normalized_features(&fs)?;
    let q = fs.qualities();
    let l = l_from_normalized(&rows, q);
    let eps = params.jitter;
    let a = factor_with_retry(&l, eps, eps)?;
    let c = factor_with_retry(&l, 1.0 + eps, eps)?;
    let loss = -(a.log_det() - c.log_det());

    // dloss/dL = −A⁻¹ + C⁻¹ (symmetric).
    let ainv = a.inverse();
    let cinv = c.inverse();
    let b = fs.batch();
    let vocab = fs.vocab();
    let mut upstream = vec![0.0; b * vocab];
    for i in 0..b {
        // dloss/dn_i = 2 Σ_j G_ij q_i q_j n_j
        let mut gn = vec![0.0; vocab];
        for j in 0..b {
            let g = cinv[(i, j)] - ainv[(i, j)];
            let w = 2.0 * g * q[i] * q[j];
            for (o, x) in gn.iter_mut().zip(&rows[j]) {
                *o += w * x;
            }
        }
        // Through n = v/‖v‖: (g − (g·n) n)/‖v‖
        let n = &rows[i];
        let gdotn: f64 = gn.iter().zip(n).map(|(x, y)| x * y).sum();
        let out = &mut upstream[i * vocab..(i + 1) * vocab];
        for ((o, g), nk) in out.iter_mut().zip(&gn).zip(n) {
            *o = (g - gdotn * nk) / norms[i];
        }
    }
    let grad = backprop_with(&upstream, &fs, &p, vjp)?;
    Ok((grad, loss))
}

/// One DPP logits update: `X − α_t·∇_X L_DPP`.
pub fn dpp_step(
    logits: &LogitsBatch,
    mask: &MaskState,
    params: &DppParams,
    remaining: usize,
    total: usize,
) -> Result<LogitsBatch> {
    params.validate()?;
    let alpha_t = params.anneal.alpha_at(params.alpha, remaining, total)?;
    if alpha_t == 0.0 {
        return Ok(logits.clone());
    }
    let (grad, _) = dpp_grad_logits(logits, mask, params)?;
    Ok(apply_update(logits, &grad, alpha_t))
}
