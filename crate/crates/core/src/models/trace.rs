//! ODDT logits traces.
//!
//! Format (little-endian):
//! - magic: `b"ODDT"`
//! - version: u32
//! - steps, batch, seq, vocab: u64 each
//! - data: f32 * steps * batch * seq * vocab, step-major then row-major `B×S×V`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::engine::{Denoiser, LogitsBatch, MaskState};
use crate::error::{contract, invalid, Error, Result};

pub const TRACE_MAGIC: [u8; 4] = *b"ODDT";
pub const TRACE_VERSION: u32 = 1;
pub const TRACE_HEADER_LEN: u64 = 4 + 4 + 4 * 8;

/// Logits recorded for every reverse step of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceData {
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    pub steps: Vec<Vec<f32>>,
}

impl TraceData {
    pub fn new(batch: usize, seq: usize, vocab: usize) -> Self {
        Self { batch, seq, vocab, steps: Vec::new() }
    }

    fn block_len(&self) -> usize {
        self.batch * self.seq * self.vocab
    }

    /// Appends one step, narrowing to `f32`.
    pub fn push_logits(&mut self, logits: &LogitsBatch) -> Result<()> {
        if logits.dims() != (self.batch, self.seq, self.vocab) {
            return Err(invalid(format!(
                "step logits {:?} do not match trace dims {:?}",
                logits.dims(),
                (self.batch, self.seq, self.vocab)
            )));
        }
        self.steps.push(logits.data().iter().map(|&x| x as f32).collect());
        Ok(())
    }

    pub fn step_logits(&self, t: usize) -> Option<LogitsBatch> {
        let block = self.steps.get(t)?;
        let data = block.iter().map(|&x| f64::from(x)).collect();
        LogitsBatch::from_vec(self.batch, self.seq, self.vocab, data).ok()
    }
}

pub fn trace_write(path: impl AsRef<Path>, trace: &TraceData) -> Result<()> {
    let n = trace.block_len();
    if trace.steps.iter().any(|s| s.len() != n) {
        return Err(invalid("trace steps have inconsistent shapes"));
    }
    if trace.steps.iter().flatten().any(|x| !x.is_finite()) {
        return Err(invalid("trace contains non-finite values"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    for d in [trace.steps.len(), trace.batch, trace.seq, trace.vocab] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for block in &trace.steps {
        for v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn trace_read(path: impl AsRef<Path>) -> Result<TraceData> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != TRACE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"ODDT\"")));
    }
    let mut u32_buf = [0u8; 4];
    read_exact(&mut r, &mut u32_buf, "version")?;
    let version = u32::from_le_bytes(u32_buf);
    if version != TRACE_VERSION {
        return Err(Error::Format(format!(
            "unsupported trace version {version}, expected version {TRACE_VERSION}"
        )));
    }
    let mut dims = [0u64; 4];
    let mut u64_buf = [0u8; 8];
    for d in dims.iter_mut() {
        read_exact(&mut r, &mut u64_buf, "dimensions")?;
        *d = u64::from_le_bytes(u64_buf);
    }
    let [steps, batch, seq, vocab] = dims;
    let payload = steps
        .checked_mul(batch)
        .and_then(|x| x.checked_mul(seq))
        .and_then(|x| x.checked_mul(vocab))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format("trace dimensions overflow".into()))?;
    let expected = TRACE_HEADER_LEN + payload;
    if file_len != expected {
        return Err(Error::Format(format!(
            "trace is {file_len} bytes, header implies {expected}"
        )));
    }

    let block = (batch * seq * vocab) as usize;
    let mut bytes = vec![0u8; block * 4];
    let mut trace = TraceData::new(batch as usize, seq as usize, vocab as usize);
    for t in 0..steps {
        read_exact(&mut r, &mut bytes, "logits")?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("non-finite logits in step {t}")));
        }
        trace.steps.push(data);
    }
    Ok(trace)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated trace while reading {what}")),
        _ => Error::Io(e),
    })
}

/// Denoiser that returns recorded logits: block `t` at step `t`.
#[derive(Debug, Clone)]
pub struct ReplayDenoiser {
    trace: TraceData,
}

impl ReplayDenoiser {
    pub fn new(trace: TraceData) -> Self {
        Self { trace }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(trace_read(path)?))
    }

    pub fn trace(&self) -> &TraceData {
        &self.trace
    }

    pub fn steps(&self) -> usize {
        self.trace.steps.len()
    }
}

impl Denoiser for ReplayDenoiser {
    fn vocab_size(&self) -> usize {
        self.trace.vocab
    }

    fn predict(&self, state: &MaskState, step: usize) -> Result<LogitsBatch> {
        if (state.batch(), state.seq(), state.vocab()) != (self.trace.batch, self.trace.seq, self.trace.vocab) {
            return Err(contract(format!(
                "state {:?} does not match recorded dims {:?}",
                (state.batch(), state.seq(), state.vocab()),
                (self.trace.batch, self.trace.seq, self.trace.vocab)
            )));
        }
        self.trace.step_logits(step).ok_or_else(|| {
            contract(format!("replay queried at step {step} but the trace has {} steps", self.steps()))
        })
    }
}
