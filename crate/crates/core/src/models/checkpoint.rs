//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! offset  size     field
//! 0       8        magic  b"VGANCKPT"
//! 8       2        format version (u16) = 1
//! 10      1        model kind (0 = mlp, 1 = categorical logits)
//! 11      8        seed (u64)
//! 19      1        hidden activation (0 = leaky-relu, 1 = relu, 2 = tanh)
//! 20      8        leaky slope (f64, 0 unless leaky-relu)
//! 28      1        output activation (0 = none, 1 = sigmoid)
//! 29      4        width count W (u32)
//! 33      4*W      widths (u32 each)
//! ..      8        parameter count P (u64)
//! ..      8*P      parameters (f64 each)
//! ```
//!
//! For categorical logits W is 1, the single width is the number of
//! outcomes, and the activation bytes are zero.

use thiserror::Error;

use super::{Activation, MlpSpec, ModelParams, OutputActivation};

pub const MAGIC: &[u8; 8] = b"VGANCKPT";
pub const VERSION: u16 = 1;

/// Refuse to allocate for absurd declared sizes in corrupt files.
const MAX_WIDTHS: usize = 64;
const MAX_PARAMS: u64 = 1 << 26;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("invalid field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{0} trailing bytes after parameters")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Mlp(MlpSpec),
    Categorical { outcomes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub seed: u64,
    pub params: ModelParams,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + 8 * ckpt.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (kind, act, slope, outp, widths): (u8, u8, f64, u8, Vec<usize>) = match &ckpt.kind {
        ModelKind::Mlp(spec) => {
            let (act, slope) = match spec.hidden() {
                Activation::LeakyRelu(s) => (0, s),
                Activation::Relu => (1, 0.0),
                Activation::Tanh => (2, 0.0),
            };
            let outp = match spec.output() {
                OutputActivation::None => 0,
                OutputActivation::Sigmoid => 1,
            };
            (0, act, slope, outp, spec.widths().to_vec())
        }
        ModelKind::Categorical { outcomes } => (1, 0, 0.0, 0, vec![*outcomes]),
    };
    out.push(kind);
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.push(act);
    out.extend_from_slice(&slope.to_le_bytes());
    out.push(outp);
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for v in ckpt.params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Invalid {
        field,
        reason: reason.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let kind = r.u8()?;
    let seed = r.u64()?;
    let act = r.u8()?;
    let slope = r.f64()?;
    let outp = r.u8()?;
    let n_widths = r.u32()? as usize;
    if n_widths == 0 || n_widths > MAX_WIDTHS {
        return Err(invalid("width count", format!("{n_widths} out of range")));
    }
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(r.u32()? as usize);
    }
    let kind = match kind {
        0 => {
            let hidden = match act {
                0 if slope.is_finite() => Activation::LeakyRelu(slope),
                0 => return Err(invalid("leaky slope", "non-finite")),
                1 | 2 if slope.to_bits() != 0 => {
                    return Err(invalid("leaky slope", "must be 0 unless leaky-relu"))
                }
                1 => Activation::Relu,
                2 => Activation::Tanh,
                t => return Err(invalid("hidden activation", format!("unknown tag {t}"))),
            };
            let output = match outp {
                0 => OutputActivation::None,
                1 => OutputActivation::Sigmoid,
                t => return Err(invalid("output activation", format!("unknown tag {t}"))),
            };
            let spec = MlpSpec::new(widths, hidden, output)
                .map_err(|e| invalid("widths", e.to_string()))?;
            ModelKind::Mlp(spec)
        }
        1 => {
            if n_widths != 1 || widths[0] < 2 {
                return Err(invalid("widths", "categorical needs one width >= 2"));
            }
            if act != 0 || slope.to_bits() != 0 || outp != 0 {
                return Err(invalid("activation", "must be zero for categorical logits"));
            }
            ModelKind::Categorical {
                outcomes: widths[0],
            }
        }
        t => return Err(invalid("model kind", format!("unknown tag {t}"))),
    };
    let expected = match &kind {
        ModelKind::Mlp(spec) => spec.param_count() as u64,
        ModelKind::Categorical { outcomes } => *outcomes as u64,
    };
    let count = r.u64()?;
    if count != expected || count > MAX_PARAMS {
        return Err(invalid(
            "parameter count",
            format!("{count} does not match architecture ({expected})"),
        ));
    }
    let mut values = Vec::with_capacity(count as usize);
    for _ in 0..count {
        values.push(r.f64()?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    let params = ModelParams::new(values).map_err(|_| invalid("parameters", "non-finite entry"))?;
    Ok(Checkpoint { kind, seed, params })
}
