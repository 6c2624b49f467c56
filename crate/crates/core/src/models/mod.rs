//! Denoisers for desk-scale experiments.

pub mod bigram;
pub mod planted;
pub mod trace;

pub use bigram::{bigram_train, BigramDenoiser};
pub use planted::{check_answer, planted_predict, PlantedSuite, PlantedTask};
pub use trace::{trace_read, trace_write, ReplayDenoiser, TraceData};

use std::hint::black_box;

use crate::engine::{Denoiser, LogitsBatch, MaskState};
use crate::error::Result;

/// Wraps a denoiser and repeats its forward pass `work` times per call,
/// returning the last result. Used to vary model cost at fixed output.
#[derive(Debug, Clone)]
pub struct CostlyDenoiser<D> {
    inner: D,
    work: usize,
}

impl<D: Denoiser> CostlyDenoiser<D> {
    pub fn new(inner: D, work: usize) -> Self {
        Self { inner, work: work.max(1) }
    }

    pub fn work(&self) -> usize {
        self.work
    }
}

impl<D: Denoiser> Denoiser for CostlyDenoiser<D> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn predict(&self, state: &MaskState, step: usize) -> Result<LogitsBatch> {
        for _ in 1..self.work {
            black_box(self.inner.predict(black_box(state), step)?);
        }
        self.inner.predict(state, step)
    }
}

use crate::engine::Sequence;

/// A denoiser that may also know which outputs count as correct.
pub trait Problem: Denoiser {
    fn id(&self) -> &str;

    /// `Some(correct)` when the problem has an answer checker.
    fn check(&self, _output: &Sequence) -> Option<bool> {
        None
    }
}

impl Problem for PlantedTask {
    fn id(&self) -> &str {
        &self.id
    }

    fn check(&self, output: &Sequence) -> Option<bool> {
        Some(self.check_answer(output))
    }
}

impl Problem for BigramDenoiser {
    fn id(&self) -> &str {
        "bigram"
    }
}

impl Problem for ReplayDenoiser {
    fn id(&self) -> &str {
        "replay"
    }
}

impl<P: Problem> Problem for CostlyDenoiser<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn check(&self, output: &Sequence) -> Option<bool> {
        self.inner.check(output)
    }
}
