//! Binary model and update records.
//!
//! Model (`RIFLE-MODEL-v1`): magic, u32 input_dim, u32 layer count, then per
//! layer u32 fan_in, u32 fan_out, u8 activation (0 relu, 1 identity),
//! `fan_in·fan_out` f64 weights row-major, `fan_out` f64 biases.
//!
//! Update log (`RIFLE-UPD-v1`): magic, then records of u32 round, u32
//! client_id, u32 rows, u32 classes, u64 n_samples, logits as f64, u8 grad
//! flag, and when set u32 C, u32 d followed by `C·d` f64.
//!
//! All integers and floats are little-endian.

use rifle_core::model::{Activation, DenseLayer};
use rifle_core::{ClientUpdate, DenseModel, LogitBatch, Matrix};

pub const MODEL_MAGIC: &[u8; 14] = b"RIFLE-MODEL-v1";
pub const UPDATE_MAGIC: &[u8; 12] = b"RIFLE-UPD-v1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unexpected end of record at byte {0}")]
    Truncated(usize),
    #[error("unknown activation tag {0}")]
    Activation(u8),
    #[error("trailing {0} bytes")]
    Trailing(usize),
    #[error("decoded content is invalid: {0}")]
    Invalid(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.at.checked_add(n).ok_or(FormatError::Truncated(self.at))?;
        let out = self.bytes.get(self.at..end).ok_or(FormatError::Truncated(self.at))?;
        self.at = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or(FormatError::Truncated(self.at))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn invalid(e: rifle_core::Error) -> FormatError {
    FormatError::Invalid(e.to_string())
}

pub fn encode_model(model: &DenseModel) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    put_u32(&mut out, model.input_dim());
    put_u32(&mut out, model.layers().len());
    for layer in model.layers() {
        put_u32(&mut out, layer.fan_in());
        put_u32(&mut out, layer.fan_out());
        out.push(match layer.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
        put_f64s(&mut out, layer.weights.as_slice());
        put_f64s(&mut out, &layer.bias);
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<DenseModel, FormatError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let _input_dim = r.u32()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let fan_in = r.u32()?;
        let fan_out = r.u32()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            t => return Err(FormatError::Activation(t)),
        };
        let weights = Matrix::new(fan_in, fan_out, r.f64s(fan_in * fan_out)?).map_err(invalid)?;
        let bias = r.f64s(fan_out)?;
        layers.push(DenseLayer {
            weights,
            bias,
            activation,
        });
    }
    if !r.done() {
        return Err(FormatError::Trailing(bytes.len() - r.at));
    }
    DenseModel::from_layers(layers).map_err(invalid)
}

/// Appends one update record (without the file magic).
pub fn encode_update(out: &mut Vec<u8>, round: usize, u: &ClientUpdate) {
    let z = u.logits.matrix();
    put_u32(out, round);
    put_u32(out, u.client_id);
    put_u32(out, z.rows());
    put_u32(out, z.cols());
    out.extend_from_slice(&(u.n_samples as u64).to_le_bytes());
    put_f64s(out, z.as_slice());
    match &u.grad_share {
        Some(g) => {
            out.push(1);
            put_u32(out, g.rows());
            put_u32(out, g.cols());
            put_f64s(out, g.as_slice());
        }
        None => out.push(0),
    }
}

/// Decodes a whole update log into `(round, update)` pairs. Validation
/// logits are not persisted.
pub fn decode_updates(bytes: &[u8]) -> Result<Vec<(usize, ClientUpdate)>, FormatError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(UPDATE_MAGIC.len())? != UPDATE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut out = Vec::new();
    while !r.done() {
        let round = r.u32()?;
        let client_id = r.u32()?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let n_samples = r.u64()? as usize;
        let z = Matrix::new(rows, cols, r.f64s(rows * cols)?).map_err(invalid)?;
        let grad_share = match r.u8()? {
            0 => None,
            1 => {
                let (c, d) = (r.u32()?, r.u32()?);
                Some(Matrix::new(c, d, r.f64s(c * d)?).map_err(invalid)?)
            }
            t => return Err(FormatError::Invalid(format!("grad flag {t}"))),
        };
        out.push((
            round,
            ClientUpdate {
                client_id,
                logits: LogitBatch::new(z).map_err(invalid)?,
                grad_share,
                n_samples,
                val_logits: None,
            },
        ));
    }
    Ok(out)
}
