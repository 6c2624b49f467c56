//! Batch features for diversity guidance.
//!
//! Each sample is summarised by a vocabulary-length vector: the max-pool over
//! positions of a per-position distribution that is the softmaxed logits at
//! masked positions and a one-hot indicator at committed ones. A scalar
//! quality score (the model's mean confidence in its committed tokens)
//! weights the diversity losses and is always treated as a constant.

use serde::{Deserialize, Serialize};

use crate::engine::{LogitsBatch, MaskState};
use crate::error::{contract, invalid, Result};
use crate::tensor::{softmax_into, softmax_vjp};

/// How a row of the unified distribution was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Masked position: softmax of the logits. Only these rows carry gradient.
    Softmax,
    /// Committed generated token: one-hot constant.
    OneHot,
    /// Prompt token: one-hot, excluded from pooling.
    Prompt,
}

/// Per-position probability rows for a whole batch.
#[derive(Debug, Clone)]
pub struct UnifiedDistribution {
    batch: usize,
    seq: usize,
    vocab: usize,
    probs: Vec<f64>,
    kinds: Vec<RowKind>,
}

impl UnifiedDistribution {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.seq, self.vocab)
    }

    pub fn row(&self, i: usize, s: usize) -> &[f64] {
        let start = (i * self.seq + s) * self.vocab;
        &self.probs[start..start + self.vocab]
    }

    pub fn kind(&self, i: usize, s: usize) -> RowKind {
        self.kinds[i * self.seq + s]
    }

    fn pooled(&self, i: usize, s: usize) -> bool {
        self.kind(i, s) != RowKind::Prompt
    }
}

/// Options shared by every feature consumer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// Restrict pooling to the union of per-position top-k vocabulary entries.
    pub top_k: Option<usize>,
}

/// Features, qualities and max-pool routing for a batch.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    batch: usize,
    vocab: usize,
    features: Vec<f64>,
    qualities: Vec<f64>,
    routing: Vec<Option<usize>>,
}

impl FeatureSet {
    /// Assembles a feature set directly (qualities default to 1, no routing).
    /// Useful for kernels that only look at features.
    pub fn from_features(features: Vec<Vec<f64>>, qualities: Vec<f64>) -> Result<Self> {
        let batch = features.len();
        let vocab = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != vocab) {
            return Err(invalid("feature vectors have different lengths"));
        }
        if qualities.len() != batch {
            return Err(invalid(format!("{} qualities for {batch} samples", qualities.len())));
        }
        if features.iter().flatten().chain(&qualities).any(|x| !x.is_finite()) {
            return Err(invalid("non-finite feature or quality"));
        }
        Ok(Self { batch, vocab, features: features.concat(), qualities, routing: vec![None; batch * vocab] })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn quality(&self, i: usize) -> f64 {
        self.qualities[i]
    }

    pub fn qualities(&self) -> &[f64] {
        &self.qualities
    }

    pub fn set_qualities(&mut self, qualities: Vec<f64>) -> Result<()> {
        if qualities.len() != self.batch {
            return Err(invalid(format!("{} qualities for {} samples", qualities.len(), self.batch)));
        }
        self.qualities = qualities;
        Ok(())
    }

    /// Position whose row attained the max for `(sample, token)`, if any.
    pub fn route(&self, i: usize, w: usize) -> Option<usize> {
        self.routing[i * self.vocab + w]
    }
}

/// Builds the unified distribution: softmax rows at masked positions,
/// one-hot rows at committed and prompt positions.
pub fn unified_distribution(logits: &LogitsBatch, mask: &MaskState) -> Result<UnifiedDistribution> {
    let (batch, seq, vocab) = logits.dims();
    if (mask.batch(), mask.seq(), mask.vocab()) != (batch, seq, vocab) {
        return Err(contract(format!(
            "logits {:?} do not match mask state {:?}",
            logits.dims(),
            (mask.batch(), mask.seq(), mask.vocab())
        )));
    }
    let mut probs = vec![0.0; batch * seq * vocab];
    let mut kinds = Vec::with_capacity(batch * seq);
    for i in 0..batch {
        for s in 0..seq {
            let start = (i * seq + s) * vocab;
            let out = &mut probs[start..start + vocab];
            if mask.is_masked(i, s) {
                let row = logits.row(i, s);
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("logits contain non-finite values"));
                }
                softmax_into(row, out);
                kinds.push(RowKind::Softmax);
            } else {
                let t = mask.token(i, s) as usize;
                if t >= vocab {
                    return Err(contract(format!("realized token {t} at ({i},{s}) outside vocabulary {vocab}")));
                }
                out[t] = 1.0;
                kinds.push(if mask.is_prompt(i, s) { RowKind::Prompt } else { RowKind::OneHot });
            }
        }
    }
    Ok(UnifiedDistribution { batch, seq, vocab, probs, kinds })
}

/// Max-pools each sample's non-prompt rows into a feature vector and records
/// which position won each vocabulary entry (lowest position on ties).
///
/// Qualities are set to 1; use [`quality_scores`] for the real values.
pub fn extract_features(p: &UnifiedDistribution, options: FeatureOptions) -> FeatureSet {
    let (batch, seq, vocab) = p.dims();
    let mut features = vec![0.0; batch * vocab];
    let mut routing = vec![None; batch * vocab];
    let mut allowed = vec![true; vocab];
    for i in 0..batch {
        if let Some(k) = options.top_k {
            allowed.iter_mut().for_each(|a| *a = false);
            for s in (0..seq).filter(|&s| p.pooled(i, s)) {
                for w in top_k_indices(p.row(i, s), k) {
                    allowed[w] = true;
                }
            }
        }
        let feat = &mut features[i * vocab..(i + 1) * vocab];
        let route = &mut routing[i * vocab..(i + 1) * vocab];
        for s in (0..seq).filter(|&s| p.pooled(i, s)) {
            for (w, &x) in p.row(i, s).iter().enumerate() {
                if !allowed[w] {
                    continue;
                }
                if route[w].is_none() || x > feat[w] {
                    feat[w] = x;
                    route[w] = Some(s);
                }
            }
        }
    }
    FeatureSet { batch, vocab, features, qualities: vec![1.0; batch], routing }
}

/// Indices of the `k` largest entries (lowest index first among ties).
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

/// Mean over committed non-prompt positions of the model's max softmax
/// probability; 1 when nothing is committed yet.
pub fn quality_scores(logits: &LogitsBatch, mask: &MaskState) -> Result<Vec<f64>> {
    let (batch, seq, vocab) = logits.dims();
    if (mask.batch(), mask.seq(), mask.vocab()) != (batch, seq, vocab) {
        return Err(contract("logits do not match mask state"));
    }
    let mut probs = vec![0.0; vocab];
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in 0..seq {
            if mask.is_masked(i, s) || mask.is_prompt(i, s) {
                continue;
            }
            let row = logits.row(i, s);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(invalid("logits contain non-finite values"));
            }
            softmax_into(row, &mut probs);
            sum += probs.iter().copied().fold(0.0, f64::max);
            count += 1;
        }
        out.push(if count == 0 { 1.0 } else { sum / count as f64 });
    }
    Ok(out)
}

/// Features and qualities in one call.
pub fn featurize(
    logits: &LogitsBatch,
    mask: &MaskState,
    options: FeatureOptions,
) -> Result<(UnifiedDistribution, FeatureSet)> {
    let p = unified_distribution(logits, mask)?;
    let mut fs = extract_features(&p, options);
    fs.qualities = quality_scores(logits, mask)?;
    Ok((p, fs))
}

pub(crate) type VjpFn = fn(&[f64], &[f64]) -> Result<Vec<f64>>;

/// Pulls a feature-space gradient (`B × V`, row-major) back to the logits.
///
/// Each entry flows to the position that won the max-pool; one-hot rows are
/// constants and receive nothing.
pub fn backprop_to_logits(
    upstream: &[f64],
    fs: &FeatureSet,
    p: &UnifiedDistribution,
) -> Result<LogitsBatch> {
    backprop_with(upstream, fs, p, softmax_vjp)
}

pub(crate) fn backprop_with(
    upstream: &[f64],
    fs: &FeatureSet,
    p: &UnifiedDistribution,
    vjp: VjpFn,
) -> Result<LogitsBatch> {
    let (batch, seq, vocab) = p.dims();
    if fs.batch != batch || fs.vocab != vocab {
        return Err(contract("feature set does not match the distribution"));
    }
    if upstream.len() != batch * vocab {
        return Err(invalid(format!(
            "upstream gradient has {} entries, expected {batch}x{vocab}",
            upstream.len()
        )));
    }
    let mut grad = LogitsBatch::zeros(batch, seq, vocab);
    let mut acc = vec![0.0; seq * vocab];
    let mut touched = vec![false; seq];
    for i in 0..batch {
        acc.iter_mut().for_each(|x| *x = 0.0);
        touched.iter_mut().for_each(|x| *x = false);
        for w in 0..vocab {
            let u = upstream[i * vocab + w];
            if u == 0.0 {
                continue;
            }
            let Some(s) = fs.route(i, w) else { continue };
            if s >= seq {
                return Err(contract(format!("routing position {s} outside sequence of {seq}")));
            }
            if p.kind(i, s) == RowKind::Softmax {
                acc[s * vocab + w] += u;
                touched[s] = true;
            }
        }
        for s in (0..seq).filter(|&s| touched[s]) {
            let g = vjp(p.row(i, s), &acc[s * vocab..(s + 1) * vocab])?;
            grad.row_mut(i, s).copy_from_slice(&g);
        }
    }
    Ok(grad)
}

/// `J·Jᵀ·x` for one sample, where `J` is the Jacobian of its feature vector
/// with respect to its logits.
pub(crate) fn feature_gram_apply(fs: &FeatureSet, p: &UnifiedDistribution, i: usize, x: &[f64]) -> Vec<f64> {
    let (_, seq, vocab) = p.dims();
    let mut acc = vec![0.0; seq * vocab];
    let mut touched = vec![false; seq];
    for (w, &xw) in x.iter().enumerate() {
        if let Some(s) = fs.route(i, w) {
            if p.kind(i, s) == RowKind::Softmax {
                acc[s * vocab + w] += xw;
                touched[s] = true;
            }
        }
    }
    // Jᵀx per touched row: p ⊙ (a − (a·p)).
    for s in (0..seq).filter(|&s| touched[s]) {
        let row = p.row(i, s);
        let a = &mut acc[s * vocab..(s + 1) * vocab];
        let ap: f64 = a.iter().zip(row).map(|(x, y)| x * y).sum();
        for (ak, pk) in a.iter_mut().zip(row) {
            *ak = pk * (*ak - ap);
        }
    }
    // J y: entry w reads back from its routed row.
    let mut out = vec![0.0; vocab];
    let mut row_dot = vec![f64::NAN; seq];
    for (w, o) in out.iter_mut().enumerate() {
        let Some(s) = fs.route(i, w) else { continue };
        if !touched[s] {
            continue;
        }
        let row = p.row(i, s);
        let y = &acc[s * vocab..(s + 1) * vocab];
        if row_dot[s].is_nan() {
            row_dot[s] = y.iter().zip(row).map(|(a, b)| a * b).sum();
        }
        *o = row[w] * (y[w] - row_dot[s]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(rows: &[Vec<u32>], vocab: usize) -> MaskState {
        MaskState::from_tokens(rows, vocab).unwrap()
    }

    #[test]
    fn unified_rows() {
        let logits = LogitsBatch::from_vec(1, 2, 3, vec![0.0; 6]).unwrap();
        let mask = state(&[vec![2, 3]], 3);
        let p = unified_distribution(&logits, &mask).unwrap();
        assert_eq!(p.row(0, 0), &[0.0, 0.0, 1.0]);
        assert_eq!(p.kind(0, 0), RowKind::OneHot);
        for x in p.row(0, 1) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn realized_token_out_of_range() {
        let logits = LogitsBatch::zeros(1, 1, 3);
        let mut mask = state(&[vec![3]], 3);
        mask.commit(0, 0, 1).unwrap();
        assert!(unified_distribution(&logits, &mask).is_ok());
        let logits = LogitsBatch::zeros(1, 1, 2);
        assert!(unified_distribution(&logits, &mask).is_err());
    }

    #[test]
    fn max_pool_and_routing() {
        let l0 = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        let l1 = [0.1f64.ln(), 0.8f64.ln(), 0.1f64.ln()];
        let logits = LogitsBatch::from_vec(1, 2, 3, [l0, l1].concat()).unwrap();
        let mask = state(&[vec![3, 3]], 3);
        let (_, fs) = featurize(&logits, &mask, FeatureOptions::default()).unwrap();
        let v = fs.feature(0);
        for (a, b) in v.iter().zip([0.7, 0.8, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fs.route(0, 0), Some(0));
        assert_eq!(fs.route(0, 1), Some(1));
        // Exact tie on token 2 routes to the lower position.
        assert_eq!(fs.route(0, 2), Some(0));
    }

    #[test]
    fn single_position_feature_is_the_row() {
        let logits = LogitsBatch::from_vec(1, 1, 3, vec![0.3, -0.4, 1.1]).unwrap();
        let mask = state(&[vec![3]], 3);
        let (p, fs) = featurize(&logits, &mask, FeatureOptions::default()).unwrap();
        assert_eq!(fs.feature(0), p.row(0, 0));
    }

    #[test]
    fn committed_token_gives_unit_feature() {
        let logits = LogitsBatch::from_vec(1, 2, 3, vec![0.1, 0.2, 0.3, 1.0, 2.0, 0.5]).unwrap();
        let mask = state(&[vec![0, 3]], 3);
        let (_, fs) = featurize(&logits, &mask, FeatureOptions::default()).unwrap();
        assert_eq!(fs.feature(0).iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn prompt_rows_are_not_pooled() {
        let logits = LogitsBatch::from_vec(1, 2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = state(&[vec![0, 2]], 2).with_prompt_len(1).unwrap();
        let (_, fs) = featurize(&logits, &mask, FeatureOptions::default()).unwrap();
        assert_eq!(fs.feature(0), &[0.5, 0.5]);
        assert_eq!(fs.quality(0), 1.0);
    }

    #[test]
    fn quality_examples() {
        // One committed position, uniform logits, V = 4.
        let logits = LogitsBatch::zeros(1, 2, 4);
        let mask = state(&[vec![1, 4]], 4);
        assert!((quality_scores(&logits, &mask).unwrap()[0] - 0.25).abs() < 1e-15);

        let mask = state(&[vec![4, 4]], 4);
        assert_eq!(quality_scores(&logits, &mask).unwrap(), vec![1.0]);

        // Max-probabilities 0.6 and 0.8.
        let r0 = [0.6f64.ln(), 0.4f64.ln()];
        let r1 = [0.2f64.ln(), 0.8f64.ln()];
        let logits = LogitsBatch::from_vec(1, 2, 2, [r0, r1].concat()).unwrap();
        let mask = state(&[vec![0, 0]], 2);
        assert!((quality_scores(&logits, &mask).unwrap()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn quality_ignores_masked_logits() {
        let mask = state(&[vec![1, 3, 3]], 3);
        let a = LogitsBatch::from_vec(1, 3, 3, vec![0.1, 0.9, 0.0, 5.0, 1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let b = LogitsBatch::from_vec(1, 3, 3, vec![0.1, 0.9, 0.0, -3.0, 8.0, 2.0, 1.0, 1.0, 7.0]).unwrap();
        assert_eq!(quality_scores(&a, &mask).unwrap(), quality_scores(&b, &mask).unwrap());
    }

    #[test]
    fn top_k_restricts_pooling() {
        let logits = LogitsBatch::from_vec(1, 2, 4, vec![3.0, 2.0, 0.0, 0.0, 0.0, 3.0, 2.0, 0.0]).unwrap();
        let mask = state(&[vec![4, 4]], 4);
        let (_, fs) = featurize(&logits, &mask, FeatureOptions { top_k: Some(1) }).unwrap();
        let v = fs.feature(0);
        assert!(v[0] > 0.0 && v[1] > 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(fs.route(0, 3), None);
    }

    #[test]
    fn backprop_zero_cases() {
        let logits = LogitsBatch::from_vec(1, 2, 3, vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap();
        let mask = state(&[vec![3, 3]], 3);
        let (p, fs) = featurize(&logits, &mask, FeatureOptions::default()).unwrap();
        let g = backprop_to_logits(&[0.0; 3], &fs, &p).unwrap();
        assert!(g.data().iter().all(|x| *x == 0.0));

        let mask = state(&[vec![0, 2]], 3);
        let (p, fs) = featurize(&logits, &mask, FeatureOptions::default()).unwrap();
        let g = backprop_to_logits(&[1.0, -2.0, 0.5], &fs, &p).unwrap();
        assert!(g.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn backprop_rejects_bad_upstream() {
        let logits = LogitsBatch::zeros(1, 1, 3);
        let mask = state(&[vec![3]], 3);
        let (p, fs) = featurize(&logits, &mask, FeatureOptions::default()).unwrap();
        assert!(backprop_to_logits(&[1.0], &fs, &p).is_err());
    }
}
