//! Pass@k, coverage and diversity statistics.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};

use crate::engine::{Sequence, TokenId};
use crate::error::{invalid, Result};
use crate::eval::RunReport;

/// Fraction of reports with a correct output among their first `k`.
///
/// Expects one report per problem; failed reports must be filtered out first.
pub fn pass_at_k<R: Borrow<RunReport>>(reports: &[R], k: usize) -> Result<f64> {
    if reports.is_empty() {
        return Err(invalid("pass@k over an empty report set"));
    }
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if let Some(r) = reports.iter().map(Borrow::borrow).find(|r| k > r.correct.len()) {
        return Err(invalid(format!("k={k} exceeds batch size {} of {}", r.correct.len(), r.problem)));
    }
    let solved = reports.iter().map(Borrow::borrow).filter(|r: &&RunReport| r.correct[..k].iter().any(|&c| c)).count();
    Ok(solved as f64 / reports.len() as f64)
}

/// Problems solved by at least one successful report of any configuration,
/// as a count and a fraction of all problems seen.
pub fn union_coverage(reports: &[RunReport]) -> Result<(usize, f64)> {
    if reports.is_empty() {
        return Err(invalid("union coverage over an empty report set"));
    }
    let mut problems: BTreeMap<&str, bool> = BTreeMap::new();
    for r in reports {
        let solved = r.failed.is_none() && r.correct.iter().any(|&c| c);
        *problems.entry(&r.problem).or_insert(false) |= solved;
    }
    let count = problems.values().filter(|&&s| s).count();
    Ok((count, count as f64 / problems.len() as f64))
}

/// Mean over unordered pairs of `1 − cos` between L2-normalized token
/// histograms.
pub fn pairwise_diversity(outputs: &[Sequence]) -> Result<f64> {
    let tokens: Vec<&[TokenId]> = outputs.iter().map(|s| s.tokens.as_slice()).collect();
    token_diversity(&tokens)
}

pub fn token_diversity(outputs: &[&[TokenId]]) -> Result<f64> {
    let histograms: Vec<BTreeMap<TokenId, f64>> = outputs
        .iter()
        .map(|tokens| {
            let mut counts = BTreeMap::new();
            for &t in *tokens {
                *counts.entry(t).or_insert(0.0) += 1.0;
            }
            counts
        })
        .collect();
    mean_pairwise(&histograms, |a, b| {
        let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
        let na: f64 = a.values().map(|x| x * x).sum();
        let nb: f64 = b.values().map(|x| x * x).sum();
        if na == 0.0 || nb == 0.0 {
            return Err(invalid("empty output has no token histogram"));
        }
        Ok(dot / (na * nb).sqrt())
    })
}

/// As [`pairwise_diversity`] for arbitrary non-zero vectors (e.g. features).
pub fn vector_diversity(vectors: &[Vec<f64>]) -> Result<f64> {
    mean_pairwise(vectors, |a, b| {
        if a.len() != b.len() {
            return Err(invalid("vectors have different lengths"));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum();
        if na == 0.0 || nb == 0.0 {
            return Err(invalid("zero vector has no direction"));
        }
        Ok(dot / (na * nb).sqrt())
    })
}

fn mean_pairwise<T>(items: &[T], cosine: impl Fn(&T, &T) -> Result<f64>) -> Result<f64> {
    if items.len() < 2 {
        return Err(invalid(format!("diversity needs at least 2 outputs, got {}", items.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            total += 1.0 - cosine(&items[i], &items[j])?.clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Distinct outputs in a batch.
pub fn distinct_outputs(outputs: &[Vec<TokenId>]) -> usize {
    outputs.iter().collect::<BTreeSet<_>>().len()
}
