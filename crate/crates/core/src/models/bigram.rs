//! Count-based bigram denoiser.
//!
//! Sequences are padded with a start symbol on the left and an end symbol on
//! the right. A masked position is predicted from the average of its left
//! neighbour's forward transition and its right neighbour's reverse
//! transition; a masked neighbour contributes the corpus unigram instead.

use crate::engine::{Denoiser, LogitsBatch, MaskState, Sequence, TokenId};
use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub struct BigramDenoiser {
    vocab: usize,
    /// Row `a` (or `vocab` for start): distribution of the next symbol over
    /// `vocab` tokens plus end.
    forward: Vec<Vec<f64>>,
    /// Row `b` (or `vocab` for end): distribution of the previous symbol over
    /// `vocab` tokens plus start.
    backward: Vec<Vec<f64>>,
    unigram: Vec<f64>,
}

/// Add-one smoothed bigram counts from a corpus.
pub fn bigram_train(corpus: &[Sequence], vocab: usize) -> Result<BigramDenoiser> {
    if corpus.is_empty() {
        return Err(invalid("bigram corpus is empty"));
    }
    let boundary = vocab;
    let n = vocab + 1;
    let mut fwd = vec![vec![1.0; n]; n];
    let mut bwd = vec![vec![1.0; n]; n];
    let mut uni = vec![1.0; vocab];
    for seq in corpus {
        if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(invalid(format!("corpus token {t} outside vocabulary of {vocab}")));
        }
        let padded: Vec<usize> = std::iter::once(boundary)
            .chain(seq.tokens.iter().map(|&t| t as usize))
            .chain(std::iter::once(boundary))
            .collect();
        for pair in padded.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            fwd[a][b] += 1.0;
            bwd[b][a] += 1.0;
        }
        for &t in &seq.tokens {
            uni[t as usize] += 1.0;
        }
    }
    let normalize = |rows: &mut Vec<Vec<f64>>| {
        for r in rows.iter_mut() {
            let total: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= total);
        }
    };
    normalize(&mut fwd);
    normalize(&mut bwd);
    let total: f64 = uni.iter().sum();
    uni.iter_mut().for_each(|x| *x /= total);
    Ok(BigramDenoiser { vocab, forward: fwd, backward: bwd, unigram: uni })
}

impl BigramDenoiser {
    /// `P(next | prev)` over tokens and the end symbol (index `vocab`).
    /// Pass `None` for the start symbol.
    pub fn next_distribution(&self, prev: Option<TokenId>) -> &[f64] {
        &self.forward[prev.map_or(self.vocab, |t| t as usize)]
    }

    /// `P(prev | next)` over tokens and the start symbol. `None` is the end symbol.
    pub fn prev_distribution(&self, next: Option<TokenId>) -> &[f64] {
        &self.backward[next.map_or(self.vocab, |t| t as usize)]
    }

    pub fn unigram(&self) -> &[f64] {
        &self.unigram
    }

    /// Restricts a distribution over tokens-plus-boundary to real tokens.
    fn tokens_only(&self, dist: &[f64]) -> Vec<f64> {
        let total: f64 = dist[..self.vocab].iter().sum();
        dist[..self.vocab].iter().map(|x| x / total).collect()
    }
}

impl Denoiser for BigramDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn predict(&self, state: &MaskState, _step: usize) -> Result<LogitsBatch> {
        if state.vocab() != self.vocab {
            return Err(invalid("state vocabulary does not match the bigram model"));
        }
        let seq = state.seq();
        let mut logits = LogitsBatch::zeros(state.batch(), seq, self.vocab);
        for i in 0..state.batch() {
            for s in 0..seq {
                let left = if s == 0 {
                    self.tokens_only(self.next_distribution(None))
                } else if state.is_masked(i, s - 1) {
                    self.unigram.clone()
                } else {
                    self.tokens_only(self.next_distribution(Some(state.token(i, s - 1))))
                };
                let right = if s + 1 == seq {
                    self.tokens_only(self.prev_distribution(None))
                } else if state.is_masked(i, s + 1) {
                    self.unigram.clone()
                } else {
                    self.tokens_only(self.prev_distribution(Some(state.token(i, s + 1))))
                };
                for (o, (l, r)) in logits.row_mut(i, s).iter_mut().zip(left.iter().zip(&right)) {
                    *o = (0.5 * (l + r)).ln();
                }
            }
        }
        Ok(logits)
    }
}
