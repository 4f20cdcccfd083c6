//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//! `b"PBCKPT\0\0"`, u32 format version, u8 kind, u8 activation, u16 reserved,
//! u64 input_dim, u64 output_dim, u64 hidden count, u64 per hidden width,
//! u64 parameter count, then the parameters as IEEE-754 f64.

use std::fs;
use std::path::Path;

use super::model::{Activation, ModelCheckpoint, ModelKind, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PBCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &ModelCheckpoint) -> Vec<u8> {
    let spec = &model.spec;
    let mut out = Vec::with_capacity(64 + 8 * model.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match spec.kind {
        ModelKind::LinearRegressor => 0,
        ModelKind::LogisticClassifier => 1,
        ModelKind::Mlp => 2,
    });
    out.push(match spec.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [spec.input_dim, spec.output_dim, spec.hidden_widths.len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for &w in &spec.hidden_widths {
        out.extend_from_slice(&(w as u64).to_le_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "value exceeds usize".to_string())
    }

    pub fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ModelCheckpoint, String> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let kind = match r.u8()? {
        0 => ModelKind::LinearRegressor,
        1 => ModelKind::LogisticClassifier,
        2 => ModelKind::Mlp,
        k => return Err(format!("unknown model kind {k}")),
    };
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        a => return Err(format!("unknown activation {a}")),
    };
    r.u16()?;
    let input_dim = r.usize()?;
    let output_dim = r.usize()?;
    let hidden = r.usize()?;
    if hidden > 1 << 16 {
        return Err("implausible hidden layer count".into());
    }
    let hidden_widths = (0..hidden).map(|_| r.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
    let n = r.usize()?;
    let params = r.f64s(n)?;
    r.finish()?;
    let spec = ModelSpec {
        kind,
        input_dim,
        output_dim,
        hidden_widths,
        activation,
    };
    ModelCheckpoint::new(spec, params).map_err(|e| e.to_string())
}

pub fn write_checkpoint(path: &Path, model: &ModelCheckpoint) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}
