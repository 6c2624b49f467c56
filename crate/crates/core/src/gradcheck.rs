//! Finite-difference checks of the analytic gradients.
//!
//! Each suite draws random small instances, evaluates the forward loss with
//! every stop-gradient quantity frozen at the unperturbed logits, and
//! compares central differences against the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpp::{dpp_grad_with, dpp_loss, DppParams};
use crate::engine::{mask_id, LogitsBatch, MaskState, TokenId};
use crate::error::Result;
use crate::features::{backprop_with, featurize, FeatureOptions, FeatureSet, RowKind, UnifiedDistribution, VjpFn};
use crate::odd::{odd_gradient_with, odd_losses, OddParams};
use crate::tensor::{softmax_vjp, Matrix};

/// Instances whose max-pool winner leads the runner-up by less than this
/// are skipped: the gradient is ambiguous there.
pub const TIE_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { instances: 200, seed: 7, tolerance: 1e-5, step: 1e-6 }
    }
}

/// Deliberate bugs for checking that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negate the softmax vector-Jacobian product.
    VjpSignFlip,
}

impl Fault {
    fn vjp(self) -> VjpFn {
        match self {
            Fault::None => softmax_vjp,
            Fault::VjpSignFlip => flipped_vjp,
        }
    }
}

fn flipped_vjp(p: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax_vjp(p, u)?.into_iter().map(|x| -x).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub worst_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_error <= self.tolerance
    }
}

/// A random small problem: logits plus a mask with a given masked fraction.
#[derive(Debug, Clone)]
pub struct Instance {
    pub logits: LogitsBatch,
    pub mask: MaskState,
}

const MASKED_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];

/// Draws an instance with `B ∈ [min_batch, 4]`, `S ≤ 6`, `V ≤ 10`.
pub fn random_instance<R: Rng>(rng: &mut R, min_batch: usize) -> Result<Instance> {
    let batch = rng.random_range(min_batch..=4);
    let seq = rng.random_range(1..=6);
    let vocab = rng.random_range(2..=10);
    let fraction = MASKED_FRACTIONS[rng.random_range(0..MASKED_FRACTIONS.len())];
    let masked = ((fraction * seq as f64).ceil() as usize).clamp(1, seq);
    let data = (0..batch * seq * vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
    let logits = LogitsBatch::from_vec(batch, seq, vocab, data)?;
    let mut rows = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut row: Vec<TokenId> = (0..seq).map(|_| rng.random_range(0..vocab) as TokenId).collect();
        let mut order: Vec<usize> = (0..seq).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for &s in &order[..masked] {
            row[s] = mask_id(vocab);
        }
        rows.push(row);
    }
    Ok(Instance { logits, mask: MaskState::from_tokens(&rows, vocab)? })
}

/// Whether any max-pool winner is within [`TIE_MARGIN`] of another row.
pub fn has_pooling_tie(p: &UnifiedDistribution) -> bool {
    let (batch, seq, vocab) = p.dims();
    for i in 0..batch {
        for w in 0..vocab {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for s in (0..seq).filter(|&s| p.kind(i, s) != RowKind::Prompt) {
                let x = p.row(i, s)[w];
                if x > best {
                    second = best;
                    best = x;
                } else if x > second {
                    second = x;
                }
            }
            if best - second < TIE_MARGIN {
                return true;
            }
        }
    }
    false
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are ~0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at every logits entry.
pub fn numeric_gradient(logits: &LogitsBatch, step: f64, f: impl Fn(&LogitsBatch) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = logits.clone();
    let mut out = Vec::with_capacity(logits.data().len());
    for k in 0..logits.data().len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + step;
        let up = f(&x)?;
        x.data_mut()[k] = orig - step;
        let down = f(&x)?;
        x.data_mut()[k] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

fn features_of(logits: &LogitsBatch, mask: &MaskState) -> Result<FeatureSet> {
    Ok(featurize(logits, mask, FeatureOptions::default())?.1)
}

/// Feature backprop against differences of `u·v(X)`.
pub fn feature_suite(config: &GradcheckConfig, fault: Fault) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    run_suite("features", config, &mut rng, 1, |inst, rng| {
        let (p, fs) = featurize(&inst.logits, &inst.mask, FeatureOptions::default())?;
        let upstream: Vec<f64> = (0..fs.batch() * fs.vocab()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = backprop_with(&upstream, &fs, &p, fault.vjp())?;
        let numeric = numeric_gradient(&inst.logits, config.step, |x| {
            let f = features_of(x, &inst.mask)?;
            Ok((0..f.batch()).flat_map(|i| f.feature(i).to_vec()).zip(&upstream).map(|(a, b)| a * b).sum())
        })?;
        Ok(relative_error(analytic.data(), &numeric))
    })
}

/// ODD loss gradient with basis, projections and qualities frozen.
pub fn odd_suite(config: &GradcheckConfig, fault: Fault) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let params = OddParams { escape: false, ..OddParams::default() };
    run_suite("odd", config, &mut rng, 2, |inst, _| {
        let (_, fs0) = featurize(&inst.logits, &inst.mask, params.features)?;
        let losses = odd_losses(&fs0, params.tolerance)?;
        if losses.terms.iter().any(|t| t.direction.is_none()) {
            return Ok(f64::NAN);
        }
        // Frozen projections p_i = v_i⁰ − r_i⁰.
        let anchors: Vec<(usize, f64, Vec<f64>)> = losses
            .terms
            .iter()
            .map(|t| {
                let v = fs0.feature(t.sample);
                let d = t.direction.as_ref().expect("checked above");
                let p: Vec<f64> = v.iter().zip(d).map(|(vk, dk)| vk - t.residual_norm * dk).collect();
                (t.sample, fs0.quality(t.sample), p)
            })
            .collect();
        let (analytic, _) = odd_gradient_with(&inst.logits, &inst.mask, &params, fault.vjp())?;
        let numeric = numeric_gradient(&inst.logits, config.step, |x| {
            let f = features_of(x, &inst.mask)?;
            Ok(anchors
                .iter()
                .map(|(i, q, p)| {
                    let r: f64 = f.feature(*i).iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    -q * r
                })
                .sum())
        })?;
        Ok(relative_error(analytic.data(), &numeric))
    })
}

/// DPP loss gradient with qualities frozen.
pub fn dpp_suite(config: &GradcheckConfig, fault: Fault) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let params = DppParams::default();
    run_suite("dpp", config, &mut rng, 2, |inst, _| {
        let q0 = features_of(&inst.logits, &inst.mask)?.qualities().to_vec();
        let (analytic, _) = dpp_grad_with(&inst.logits, &inst.mask, &params, fault.vjp())?;
        let numeric = numeric_gradient(&inst.logits, config.step, |x| {
            let f = features_of(x, &inst.mask)?;
            let rows: Vec<Vec<f64>> = (0..f.batch())
                .map(|i| {
                    let v = f.feature(i);
                    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v.iter().map(|a| a / n).collect()
                })
                .collect();
            let b = rows.len();
            let mut l = Matrix::zeros(b, b);
            for i in 0..b {
                for j in 0..b {
                    let k: f64 = rows[i].iter().zip(&rows[j]).map(|(a, c)| a * c).sum();
                    l[(i, j)] = k * q0[i] * q0[j];
                }
            }
            dpp_loss(&l, params.jitter)
        })?;
        Ok(relative_error(analytic.data(), &numeric))
    })
}

/// Draws instances until `config.instances` have been checked, skipping
/// pooling ties and instances the check declines (NaN result).
fn run_suite(
    name: &str,
    config: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    min_batch: usize,
    mut check: impl FnMut(&Instance, &mut ChaCha8Rng) -> Result<f64>,
) -> Result<SuiteResult> {
    let mut checked = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    // Bounded so that a pathological generator cannot loop forever.
    let max_draws = config.instances.saturating_mul(20).max(100);
    for _ in 0..max_draws {
        if checked == config.instances {
            break;
        }
        let inst = random_instance(rng, min_batch)?;
        let (p, _) = featurize(&inst.logits, &inst.mask, FeatureOptions::default())?;
        if has_pooling_tie(&p) {
            skipped += 1;
            continue;
        }
        let err = check(&inst, rng)?;
        if err.is_nan() {
            skipped += 1;
            continue;
        }
        worst = worst.max(err);
        checked += 1;
    }
    Ok(SuiteResult { name: name.to_string(), checked, skipped, worst_error: worst, tolerance: config.tolerance })
}

/// All three suites.
pub fn run_all(config: &GradcheckConfig, fault: Fault) -> Result<Vec<SuiteResult>> {
    Ok(vec![feature_suite(config, fault)?, odd_suite(config, fault)?, dpp_suite(config, fault)?])
}
