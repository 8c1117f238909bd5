//! Model checkpoint file.
//!
//! Layout (little-endian): magic `DRASMIL1`; `L`, `M`, number of head layers
//! `n` and the output width of each head layer, all `u64`; every parameter
//! as `f64` in row-major order (`V`, `U`, `w`, then weight and bias of each
//! head layer); a `u64` length followed by a UTF-8 JSON metadata blob.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Dense, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRASMIL1";

pub fn checkpoint_bytes(params: &ModelParams, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    params.validate()?;
    let mut buf = Vec::with_capacity(64 + params.param_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let mut put = |v: usize| buf.extend_from_slice(&(v as u64).to_le_bytes());
    put(params.attention_dim());
    put(params.embedding_dim());
    put(params.head.len());
    for layer in &params.head {
        put(layer.output_width());
    }
    for slice in params.slices() {
        for v in slice {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(metadata)?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    Ok(buf)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn dim(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        // anything this large cannot be followed by its parameters
        if v > (self.buf.len() as u64) {
            return Err(corrupt(format!("implausible dimension {v}")));
        }
        Ok(v as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| corrupt("parameter count overflows"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(ModelParams, serde_json::Value)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let l = c.dim()?;
    let m = c.dim()?;
    let n = c.dim()?;
    if l == 0 || m == 0 || n == 0 {
        return Err(corrupt("zero dimension"));
    }
    let widths = (0..n).map(|_| c.dim()).collect::<Result<Vec<_>>>()?;
    let attn_v = Matrix::from_vec(l, m, c.floats(l * m)?)?;
    let attn_u = Matrix::from_vec(l, m, c.floats(l * m)?)?;
    let attn_w = c.floats(l)?;
    let mut head = Vec::with_capacity(n);
    let mut width = m;
    for out in widths {
        let weight = Matrix::from_vec(out, width, c.floats(out * width)?)?;
        let bias = c.floats(out)?;
        head.push(Dense { weight, bias });
        width = out;
    }
    let meta_len = c.dim()?;
    let meta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| corrupt(format!("metadata: {e}")))?;
    if c.pos != buf.len() {
        return Err(corrupt("trailing bytes"));
    }
    let params = ModelParams {
        attn_v,
        attn_u,
        attn_w,
        head,
    };
    params.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, metadata: &serde_json::Value) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, metadata)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, serde_json::Value)> {
    checkpoint_from_bytes(&fs::read(path).map_err(Error::file(path))?)
}
