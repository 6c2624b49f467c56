//! Masked diffusion sampling: forward corruption, schedules, temperature
//! sampling and the confidence-remasking reverse loop.
//!
//! The reserved MASK id is one past the model vocabulary (`vocab`), so a
//! model with `V` tokens never emits it.

use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Error, Result};
use crate::tensor::softmax_into;

pub type TokenId = u32;

/// One generated or clean token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub vocab: usize,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, vocab: usize) -> Result<Self> {
        let mask = mask_id(vocab);
        if let Some(t) = tokens.iter().find(|&&t| t > mask) {
            return Err(invalid(format!("token {t} outside vocabulary of {vocab}")));
        }
        Ok(Self { tokens, vocab })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        mask_id(self.vocab)
    }

    pub fn is_realized(&self) -> bool {
        self.tokens.iter().all(|&t| (t as usize) < self.vocab)
    }
}

pub fn mask_id(vocab: usize) -> TokenId {
    vocab as TokenId
}

/// Dense `B × S × V` tensor of per-position logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    batch: usize,
    seq: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl LogitsBatch {
    pub fn zeros(batch: usize, seq: usize, vocab: usize) -> Self {
        Self { batch, seq, vocab, data: vec![0.0; batch * seq * vocab] }
    }

    pub fn from_vec(batch: usize, seq: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * seq * vocab {
            return Err(invalid(format!(
                "logits have {} values, expected {batch}x{seq}x{vocab}",
                data.len()
            )));
        }
        Ok(Self { batch, seq, vocab, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.seq, self.vocab)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize, s: usize) -> &[f64] {
        let start = (i * self.seq + s) * self.vocab;
        &self.data[start..start + self.vocab]
    }

    pub fn row_mut(&mut self, i: usize, s: usize) -> &mut [f64] {
        let start = (i * self.seq + s) * self.vocab;
        &mut self.data[start..start + self.vocab]
    }

    /// All `S × V` logits of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.seq * self.vocab;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.seq * self.vocab;
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Keeps the first `b` samples.
    pub fn truncate_batch(&self, b: usize) -> Self {
        let b = b.min(self.batch);
        let n = self.seq * self.vocab;
        Self { batch: b, seq: self.seq, vocab: self.vocab, data: self.data[..b * n].to_vec() }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(invalid("logits contain non-finite values"))
        }
    }
}

/// Per-sample mask flags and realized tokens for a batch in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    batch: usize,
    seq: usize,
    vocab: usize,
    masked: Vec<bool>,
    prompt: Vec<bool>,
    tokens: Vec<TokenId>,
}

impl MaskState {
    /// Fully masked batch, except for an optional shared prompt prefix.
    pub fn new(batch: usize, seq: usize, vocab: usize, prompt: Option<&[TokenId]>) -> Result<Self> {
        let prompt = prompt.unwrap_or(&[]);
        if !prompt.is_empty() && prompt.len() >= seq {
            return Err(invalid(format!(
                "prompt length {} must be shorter than the sequence length {seq}",
                prompt.len()
            )));
        }
        if let Some(t) = prompt.iter().find(|&&t| t as usize >= vocab) {
            return Err(invalid(format!("prompt token {t} outside vocabulary of {vocab}")));
        }
        let mask = mask_id(vocab);
        let mut state = Self {
            batch,
            seq,
            vocab,
            masked: vec![true; batch * seq],
            prompt: vec![false; batch * seq],
            tokens: vec![mask; batch * seq],
        };
        for i in 0..batch {
            for (s, &t) in prompt.iter().enumerate() {
                let k = i * seq + s;
                state.masked[k] = false;
                state.prompt[k] = true;
                state.tokens[k] = t;
            }
        }
        Ok(state)
    }

    /// Builds a state from explicit token rows; MASK ids mark masked positions.
    pub fn from_tokens(rows: &[Vec<TokenId>], vocab: usize) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(invalid("token rows have different lengths"));
        }
        let mask = mask_id(vocab);
        let tokens = rows.concat();
        if let Some(t) = tokens.iter().find(|&&t| t > mask) {
            return Err(invalid(format!("token {t} outside vocabulary of {vocab}")));
        }
        let masked = tokens.iter().map(|&t| t == mask).collect();
        Ok(Self {
            batch: rows.len(),
            seq,
            vocab,
            masked,
            prompt: vec![false; tokens.len()],
            tokens,
        })
    }

    /// Marks the first `len` positions of every sample as prompt positions.
    pub fn with_prompt_len(mut self, len: usize) -> Result<Self> {
        for i in 0..self.batch {
            for s in 0..len.min(self.seq) {
                let k = i * self.seq + s;
                if self.masked[k] {
                    return Err(invalid("prompt positions must be realized"));
                }
                self.prompt[k] = true;
            }
        }
        Ok(self)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask_id(&self) -> TokenId {
        mask_id(self.vocab)
    }

    pub fn is_masked(&self, i: usize, s: usize) -> bool {
        self.masked[i * self.seq + s]
    }

    pub fn is_prompt(&self, i: usize, s: usize) -> bool {
        self.prompt[i * self.seq + s]
    }

    pub fn token(&self, i: usize, s: usize) -> TokenId {
        self.tokens[i * self.seq + s]
    }

    pub fn tokens(&self, i: usize) -> &[TokenId] {
        &self.tokens[i * self.seq..(i + 1) * self.seq]
    }

    pub fn masked_flags(&self, i: usize) -> &[bool] {
        &self.masked[i * self.seq..(i + 1) * self.seq]
    }

    pub fn masked_count(&self, i: usize) -> usize {
        self.masked_flags(i).iter().filter(|&&m| m).count()
    }

    /// Commits token `t` at a currently masked position.
    pub fn commit(&mut self, i: usize, s: usize, t: TokenId) -> Result<()> {
        let k = i * self.seq + s;
        if !self.masked[k] {
            return Err(contract(format!("position ({i},{s}) is already committed")));
        }
        if t as usize >= self.vocab {
            return Err(contract(format!("cannot commit token {t} with vocabulary {}", self.vocab)));
        }
        self.masked[k] = false;
        self.tokens[k] = t;
        Ok(())
    }

    pub fn truncate_batch(&self, b: usize) -> Self {
        let b = b.min(self.batch);
        let n = b * self.seq;
        Self {
            batch: b,
            seq: self.seq,
            vocab: self.vocab,
            masked: self.masked[..n].to_vec(),
            prompt: self.prompt[..n].to_vec(),
            tokens: self.tokens[..n].to_vec(),
        }
    }

    /// Realized sequences; fails if any position is still masked.
    pub fn sequences(&self) -> Result<Vec<Sequence>> {
        (0..self.batch)
            .map(|i| {
                if self.masked_count(i) > 0 {
                    return Err(contract(format!("sample {i} still has masked positions")));
                }
                Ok(Sequence { tokens: self.tokens(i).to_vec(), vocab: self.vocab })
            })
            .collect()
    }
}

/// Masking schedule for `T` reverse steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    steps: usize,
    unmask_counts: Vec<usize>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn unmask_counts(&self) -> &[usize] {
        &self.unmask_counts
    }

    /// Linear masking probability `γ(t) = t / T`.
    pub fn gamma(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }
}

/// Spreads `len` unmaskings over `steps` steps, larger shares first.
pub fn build_schedule(len: usize, steps: usize) -> Result<Schedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if steps > len {
        return Err(invalid(format!(
            "{steps} steps cannot unmask only {len} positions (need at least one per step)"
        )));
    }
    let base = len / steps;
    let extra = len % steps;
    let unmask_counts = (0..steps).map(|t| base + usize::from(t < extra)).collect();
    Ok(Schedule { steps, unmask_counts })
}

/// Forward corruption: each position independently becomes MASK with probability `γ(t)`.
pub fn forward_mask<R: Rng + ?Sized>(
    clean: &Sequence,
    t: usize,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Sequence> {
    if t > schedule.steps {
        return Err(invalid(format!("step {t} outside [0, {}]", schedule.steps)));
    }
    let gamma = schedule.gamma(t);
    let mask = clean.mask_id();
    let tokens = clean
        .tokens
        .iter()
        .map(|&tok| if rng.random::<f64>() < gamma { mask } else { tok })
        .collect();
    Ok(Sequence { tokens, vocab: clean.vocab })
}

/// Random stream for sample `index` under run seed `seed`.
///
/// Streams depend only on `(seed, index)`, never on the batch size.
pub fn sample_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Proposed tokens with their confidences for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposals {
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
}

/// Draws one proposal per position.
///
/// `temperature == 0` takes the argmax (lowest id on ties) with confidence 1.
/// Otherwise each position is drawn from `softmax(logits / θ)` using the
/// sample's own stream, and the confidence is the drawn token's probability.
pub fn sample_tokens(
    logits: &LogitsBatch,
    temperature: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Proposals> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be finite and non-negative, got {temperature}")));
    }
    logits.ensure_finite()?;
    let (batch, seq, vocab) = logits.dims();
    if rngs.len() < batch {
        return Err(invalid(format!("{} random streams for a batch of {batch}", rngs.len())));
    }
    let mut tokens = Vec::with_capacity(batch * seq);
    let mut confidences = Vec::with_capacity(batch * seq);
    let mut scaled = vec![0.0; vocab];
    let mut probs = vec![0.0; vocab];
    for (i, rng) in rngs.iter_mut().enumerate().take(batch) {
        for s in 0..seq {
            let row = logits.row(i, s);
            if temperature == 0.0 {
                tokens.push(argmax(row) as TokenId);
                confidences.push(1.0);
                continue;
            }
            for (o, &x) in scaled.iter_mut().zip(row) {
                *o = x / temperature;
            }
            softmax_into(&scaled, &mut probs);
            let dist = WeightedIndex::new(&probs)
                .map_err(|e| Error::Numerical(format!("categorical draw failed: {e}")))?;
            let tok = dist.sample(rng);
            tokens.push(tok as TokenId);
            confidences.push(probs[tok]);
        }
    }
    Ok(Proposals { tokens, confidences })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// A denoising network: maps a partially masked batch to per-position logits.
pub trait Denoiser: Sync {
    /// Number of real tokens; the MASK id is this value.
    fn vocab_size(&self) -> usize;

    /// Logits for every position of every sample at reverse step `step`
    /// (0-based, counting up from the fully masked state).
    fn predict(&self, state: &MaskState, step: usize) -> Result<LogitsBatch>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn predict(&self, state: &MaskState, step: usize) -> Result<LogitsBatch> {
        (**self).predict(state, step)
    }
}

impl<D: Denoiser + ?Sized + Send> Denoiser for Box<D> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn predict(&self, state: &MaskState, step: usize) -> Result<LogitsBatch> {
        (**self).predict(state, step)
    }
}

/// Per-step logits intervention, applied to raw logits before temperature.
pub trait GuidanceHook {
    /// `remaining` counts reverse steps left including this one (T down to 1).
    fn apply(&mut self, logits: LogitsBatch, mask: &MaskState, remaining: usize) -> Result<LogitsBatch>;
}

/// The identity hook.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoGuidance;

impl GuidanceHook for NoGuidance {
    fn apply(&mut self, logits: LogitsBatch, _mask: &MaskState, _remaining: usize) -> Result<LogitsBatch> {
        Ok(logits)
    }
}

/// One reverse step: predict, guide, sample, then commit the
/// `unmask_counts[t]` most confident masked positions of each sample.
pub fn denoise_step<D: Denoiser + ?Sized, G: GuidanceHook + ?Sized>(
    model: &D,
    state: &MaskState,
    t: usize,
    schedule: &Schedule,
    temperature: f64,
    guidance: &mut G,
    rngs: &mut [ChaCha8Rng],
) -> Result<MaskState> {
    let logits = model.predict(state, t)?;
    step_from_logits(logits, state, t, schedule, temperature, guidance, rngs)
}

pub(crate) fn step_from_logits<G: GuidanceHook + ?Sized>(
    logits: LogitsBatch,
    state: &MaskState,
    t: usize,
    schedule: &Schedule,
    temperature: f64,
    guidance: &mut G,
    rngs: &mut [ChaCha8Rng],
) -> Result<MaskState> {
    let expected = (state.batch(), state.seq(), state.vocab());
    if logits.dims() != expected {
        return Err(contract(format!(
            "denoiser returned logits of shape {:?}, expected {:?}",
            logits.dims(),
            expected
        )));
    }
    let count = *schedule
        .unmask_counts()
        .get(t)
        .ok_or_else(|| invalid(format!("step {t} outside a {}-step schedule", schedule.steps())))?;
    let remaining = schedule.steps() - t;
    let guided = guidance.apply(logits, state, remaining)?;
    if guided.dims() != expected {
        return Err(contract("guidance changed the logits shape"));
    }
    let proposals = sample_tokens(&guided, temperature, rngs)?;

    let mut next = state.clone();
    let seq = state.seq();
    for i in 0..state.batch() {
        let mut candidates: Vec<usize> = (0..seq).filter(|&s| state.is_masked(i, s)).collect();
        if candidates.len() < count {
            return Err(contract(format!(
                "sample {i} has {} masked positions but step {t} unmasks {count}",
                candidates.len()
            )));
        }
        let conf = &proposals.confidences[i * seq..(i + 1) * seq];
        // Stable sort keeps lower positions first among equal confidences.
        candidates.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
        for &s in &candidates[..count] {
            next.commit(i, s, proposals.tokens[i * seq + s])?;
        }
    }
    Ok(next)
}

/// Output of a full generation run.
#[derive(Debug, Clone)]
pub struct Generation {
    pub sequences: Vec<Sequence>,
    pub final_state: MaskState,
    /// Wall time spent inside the guidance hook, one entry per step.
    pub guidance_time: Vec<Duration>,
    pub total_time: Duration,
}

/// Runs the full reverse process from the fully masked state.
///
/// Sample `i` draws from [`sample_stream`]`(seed, i)`, so its randomness is
/// independent of the batch size.
pub fn generate_batch<D: Denoiser + ?Sized, G: GuidanceHook + ?Sized>(
    model: &D,
    prompt: Option<&[TokenId]>,
    settings: &SamplerSettings,
    guidance: &mut G,
) -> Result<Generation> {
    generate_batch_observed(model, prompt, settings, guidance, |_, _| Ok(()))
}

/// As [`generate_batch`], calling `observe(step, raw_logits)` with the
/// denoiser output of every step (before guidance).
pub fn generate_batch_observed<D, G, F>(
    model: &D,
    prompt: Option<&[TokenId]>,
    settings: &SamplerSettings,
    guidance: &mut G,
    mut observe: F,
) -> Result<Generation>
where
    D: Denoiser + ?Sized,
    G: GuidanceHook + ?Sized,
    F: FnMut(usize, &LogitsBatch) -> Result<()>,
{
    settings.validate()?;
    let start = Instant::now();
    let vocab = model.vocab_size();
    let prompt_len = prompt.map_or(0, <[TokenId]>::len);
    let schedule = build_schedule(settings.length.saturating_sub(prompt_len), settings.steps)?;
    let mut state = MaskState::new(settings.batch, settings.length, vocab, prompt)?;
    let mut rngs: Vec<ChaCha8Rng> =
        (0..settings.batch).map(|i| sample_stream(settings.seed, i)).collect();

    let mut timed = TimedHook { inner: guidance, times: Vec::with_capacity(settings.steps) };
    for t in 0..schedule.steps() {
        let logits = model.predict(&state, t)?;
        observe(t, &logits)?;
        state = step_from_logits(logits, &state, t, &schedule, settings.temperature, &mut timed, &mut rngs)?;
    }
    let sequences = state.sequences()?;
    Ok(Generation {
        sequences,
        final_state: state,
        guidance_time: timed.times,
        total_time: start.elapsed(),
    })
}

struct TimedHook<'a, G: ?Sized> {
    inner: &'a mut G,
    times: Vec<Duration>,
}

impl<G: GuidanceHook + ?Sized> GuidanceHook for TimedHook<'_, G> {
    fn apply(&mut self, logits: LogitsBatch, mask: &MaskState, remaining: usize) -> Result<LogitsBatch> {
        let start = Instant::now();
        let out = self.inner.apply(logits, mask, remaining);
        self.times.push(start.elapsed());
        out
    }
}

/// The sampler part of a generation config (guidance is configured separately).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub temperature: f64,
    pub steps: usize,
    pub length: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { temperature: 0.0, steps: 32, length: 64, batch: 16, seed: 0 }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.length < 1 || self.batch < 1 {
            return Err(invalid("steps, length and batch must all be at least 1"));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(invalid(format!("temperature must be non-negative, got {}", self.temperature)));
        }
        Ok(())
    }
}
