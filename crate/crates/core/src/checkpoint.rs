//! Binary checkpoint format for [`EncoderModel`].
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "REMENCDR"
//! 8       4     format version (u32, currently 1)
//! 12      8     payload length N (u64)
//! 20      N     payload
//! 20+N    4     CRC-32 (IEEE) of the payload
//!
//! payload:
//!   u32 d_model, u32 n_layers, u32 n_heads, u32 d_ff
//!   u8 activation (0 = gelu), u8 positional encoding (0/1), f64 dropout
//!   f64 r_max, f64 step
//!   6 x f64 feature means, 6 x f64 feature stds
//!   f64 target mean, f64 target std
//!   u32 tensor count, then per tensor: u32 rows, u32 cols, rows*cols x f64
//! ```
//!
//! Tensors follow [`EncoderModel::params`] order.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{RemError, Result};
use crate::featurize::{FeatureStats, TargetStats, FEATURE_ROWS};
use crate::geometry::RangeArray;
use crate::model::{Activation, EncoderModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"REMENCDR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode(model: &EncoderModel) -> Vec<u8> {
    let mut p = Vec::new();
    let c = &model.config;
    for v in [c.d_model, c.n_layers, c.n_heads, c.d_ff] {
        p.extend((v as u32).to_le_bytes());
    }
    p.push(match c.activation {
        Activation::Gelu => 0,
    });
    p.push(u8::from(c.positional_encoding));
    p.extend(c.dropout.to_le_bytes());
    p.extend(model.delta.r_max().to_le_bytes());
    p.extend(model.delta.step().to_le_bytes());
    for v in model.feature_stats.mean.iter().chain(&model.feature_stats.std) {
        p.extend(v.to_le_bytes());
    }
    p.extend(model.target_stats.mean.to_le_bytes());
    p.extend(model.target_stats.std.to_le_bytes());
    let params = model.params();
    p.extend((params.len() as u32).to_le_bytes());
    for t in params {
        p.extend((t.rows() as u32).to_le_bytes());
        p.extend((t.cols() as u32).to_le_bytes());
        for v in t.data() {
            p.extend(v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(HEADER_LEN + p.len() + 4);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((p.len() as u64).to_le_bytes());
    out.extend(&p);
    out.extend(crc32fast::hash(&p).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(RemError::Checkpoint("payload ends early".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<EncoderModel> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(RemError::Checkpoint("not a model checkpoint (bad magic)".to_string()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(RemError::Checkpoint("checksum mismatch: header truncated".to_string()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(RemError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != HEADER_LEN + n + 4 {
        return Err(RemError::Checkpoint(format!(
            "checksum mismatch: file is {} bytes, header declares {}",
            bytes.len(),
            HEADER_LEN + n + 4
        )));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + n];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + n..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(RemError::Checkpoint("checksum mismatch".to_string()));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let d_model = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let d_ff = r.u32()? as usize;
    let activation = match r.u8()? {
        0 => Activation::Gelu,
        a => return Err(RemError::Checkpoint(format!("unknown activation id {a}"))),
    };
    let positional_encoding = r.u8()? != 0;
    let dropout = r.f64()?;
    let config = ModelConfig { d_model, n_layers, n_heads, d_ff, dropout, activation, positional_encoding };
    let delta = RangeArray::new(r.f64()?, r.f64()?)?;
    let mut fs = FeatureStats::default();
    for i in 0..FEATURE_ROWS {
        fs.mean[i] = r.f64()?;
    }
    for i in 0..FEATURE_ROWS {
        fs.std[i] = r.f64()?;
    }
    let ts = TargetStats { mean: r.f64()?, std: r.f64()? };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.push(Tensor::from_vec(rows, cols, data)?);
    }
    if r.pos != payload.len() {
        return Err(RemError::Checkpoint("trailing bytes in payload".to_string()));
    }
    EncoderModel::from_parts(config, delta, params, fs, ts)
}

pub fn save_model(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EncoderModel> {
    decode(&std::fs::read(path)?)
}
