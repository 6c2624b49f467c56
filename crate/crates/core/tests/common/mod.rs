//! Naive reference implementations used as test oracles. They share no code
//! with the library and favour directness over speed.
#![allow(dead_code)]

use odd_core::engine::{LogitsBatch, MaskState};

/// `p_k = 1 / Σ_j exp(x_j − x_k)`.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&xk| 1.0 / x.iter().map(|&xj| (xj - xk).exp()).sum::<f64>()).collect()
}

/// Unified rows: softmax at masked positions, one-hot at committed ones,
/// `None` at prompt positions.
pub fn unified_rows(logits: &LogitsBatch, mask: &MaskState, i: usize) -> Vec<Option<Vec<f64>>> {
    let v = mask.vocab();
    (0..mask.seq())
        .map(|s| {
            if mask.is_prompt(i, s) {
                None
            } else if mask.is_masked(i, s) {
                Some(softmax(logits.row(i, s)))
            } else {
                let mut row = vec![0.0; v];
                row[mask.token(i, s) as usize] = 1.0;
                Some(row)
            }
        })
        .collect()
}

/// Max over positions of the unified rows.
pub fn max_pool(logits: &LogitsBatch, mask: &MaskState, i: usize) -> Vec<f64> {
    let rows = unified_rows(logits, mask, i);
    (0..mask.vocab())
        .map(|w| rows.iter().flatten().map(|r| r[w]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Mean max-softmax over committed non-prompt positions, 1 when there are none.
pub fn quality(logits: &LogitsBatch, mask: &MaskState, i: usize) -> f64 {
    let vals: Vec<f64> = (0..mask.seq())
        .filter(|&s| !mask.is_prompt(i, s) && !mask.is_masked(i, s))
        .map(|s| softmax(logits.row(i, s)).into_iter().fold(0.0, f64::max))
        .collect();
    if vals.is_empty() {
        1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Classical Gram-Schmidt over `vectors` in order: the residual norm of each
/// vector against the span of all earlier ones (computed by least squares on
/// the normal equations, not by a running orthonormal basis).
pub fn residual_norms(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        let prev = &vectors[..i];
        // Keep a linearly independent subset of the earlier vectors.
        let mut kept: Vec<&Vec<f64>> = Vec::new();
        for p in prev {
            let mut trial = kept.clone();
            trial.push(p);
            if gram_det(&trial) > 1e-10 * trial.iter().map(|x| dot(x, x)).product::<f64>() {
                kept = trial;
            }
        }
        let r = if kept.is_empty() {
            dot(v, v).sqrt()
        } else {
            let n = kept.len();
            let g: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| dot(kept[a], kept[b])).collect()).collect();
            let rhs: Vec<f64> = kept.iter().map(|k| dot(k, v)).collect();
            let c = solve(g, rhs);
            let mut r = v.clone();
            for (k, ck) in kept.iter().zip(&c) {
                r.iter_mut().zip(k.iter()).for_each(|(x, y)| *x -= ck * y);
            }
            dot(&r, &r).sqrt()
        };
        out.push(r);
    }
    out
}

fn gram_det(vs: &[&Vec<f64>]) -> f64 {
    let n = vs.len();
    let g: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| dot(vs[a], vs[b])).collect()).collect();
    let (sign, log) = lu_slogdet(g);
    if sign <= 0.0 {
        0.0
    } else {
        log.exp()
    }
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// `(sign, log|det|)` by LU with partial pivoting.
pub fn lu_slogdet(mut a: Vec<Vec<f64>>) -> (f64, f64) {
    let n = a.len();
    let mut sign = 1.0;
    let mut log = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        if a[piv][col] == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if piv != col {
            a.swap(col, piv);
            sign = -sign;
        }
        let d = a[col][col];
        if d < 0.0 {
            sign = -sign;
        }
        log += d.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / d;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    (sign, log)
}

/// `log det` of a symmetric positive-definite matrix.
pub fn lu_logdet(a: Vec<Vec<f64>>) -> f64 {
    let (sign, log) = lu_slogdet(a);
    assert!(sign > 0.0, "matrix is not positive definite");
    log
}

/// The DPP loss straight from determinants:
/// `−(log det(L + εI) − log det(L + (1 + ε)I))`.
pub fn dpp_loss_direct(l: &[Vec<f64>], eps: f64) -> f64 {
    let shift = |s: f64| -> Vec<Vec<f64>> {
        l.iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(j, &x)| if i == j { x + s } else { x }).collect())
            .collect()
    };
    -(lu_logdet(shift(eps)) - lu_logdet(shift(1.0 + eps)))
}

/// `L_ij = q_i q_j cos(v_i, v_j)`.
pub fn l_ensemble(features: &[Vec<f64>], q: &[f64]) -> Vec<Vec<f64>> {
    let n = features.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let c = dot(&features[i], &features[j])
                        / (dot(&features[i], &features[i]) * dot(&features[j], &features[j])).sqrt();
                    q[i] * q[j] * c
                })
                .collect()
        })
        .collect()
}

/// Posterior over templates by enumeration: prior `skew` on template 0 and
/// the rest shared equally, zeroed for templates that disagree with any
/// committed token.
pub fn planted_posterior(templates: &[Vec<u32>], skew: f64, tokens: &[u32], masked: &[bool]) -> Vec<f64> {
    let m = templates.len();
    let prior: Vec<f64> = (0..m).map(|k| if k == 0 { skew } else { (1.0 - skew) / (m - 1) as f64 }).collect();
    let w: Vec<f64> = templates
        .iter()
        .zip(&prior)
        .map(|(t, &p)| {
            let consistent = t.iter().zip(tokens).zip(masked).all(|((a, b), &mk)| mk || a == b);
            if consistent {
                p
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

/// Central-difference derivative of `f` at `x` along every coordinate.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            y[k] = x[k] + h;
            let up = f(&y);
            y[k] = x[k] - h;
            let down = f(&y);
            y[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}
