//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//! `magic "VRLPCKP1"`, `u32` tensor count, then per tensor a header of
//! `u32` name length, name bytes, `u64` rows, `u64` cols, `u8` frozen,
//! `u8` adapter flag and, when set, `u64` rank and `f64` alpha. The body
//! follows: per tensor the base matrix, then `A` and `B` when present, each
//! as row-major `f64`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::params::{LoraAdapter, ParameterSet, Tensor};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"VRLPCKP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

pub fn to_bytes<T: Scalar>(params: &ParameterSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.value.cols() as u64).to_le_bytes());
        out.push(t.frozen as u8);
        match &t.adapter {
            None => out.push(0),
            Some(ad) => {
                out.push(1);
                out.extend_from_slice(&(ad.rank() as u64).to_le_bytes());
                out.extend_from_slice(&ad.alpha.as_f64().to_le_bytes());
            }
        }
    }
    let mut put = |m: &Matrix<T>| {
        for v in m.as_slice() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    };
    for t in &params.tensors {
        put(&t.value);
        if let Some(ad) = &t.adapter {
            put(&ad.a);
            put(&ad.b);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Format(format!("size {v} out of range")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<T>, CheckpointError> {
        let n = rows.checked_mul(cols).ok_or_else(|| CheckpointError::Format("matrix too large".into()))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(CheckpointError::Format(format!("truncated {rows}x{cols} matrix")));
        }
        let data = (0..n).map(|_| self.f64().map(T::of)).collect::<Result<Vec<_>, _>>()?;
        Ok(Matrix::from_vec(rows, cols, data).expect("length checked"))
    }
}

struct Header {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
    adapter: Option<(usize, f64)>,
}

pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<ParameterSet<T>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut headers = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let (rows, cols) = (r.u64()?, r.u64()?);
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Format(format!("frozen flag {b}"))),
        };
        let adapter = match r.u8()? {
            0 => None,
            1 => Some((r.u64()?, r.f64()?)),
            b => return Err(CheckpointError::Format(format!("adapter flag {b}"))),
        };
        headers.push(Header { name, rows, cols, frozen, adapter });
    }
    let mut params = ParameterSet::new();
    for h in headers {
        let value = r.matrix(h.rows, h.cols)?;
        let adapter = match h.adapter {
            None => None,
            Some((rank, alpha)) => {
                let a = r.matrix(h.rows, rank)?;
                let b = r.matrix(rank, h.cols)?;
                Some(LoraAdapter::new(a, b, T::of(alpha)).map_err(|e| CheckpointError::Format(e.to_string()))?)
            }
        };
        params.tensors.push(Tensor { name: h.name, value, frozen: h.frozen, adapter });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save<T: Scalar>(params: &ParameterSet<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParameterSet<T>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
