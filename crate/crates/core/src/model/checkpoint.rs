//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `LXB1`, `u32` length + config text
//! (`key=value` lines, including `vocab_digest`), `u32` tensor count, then per
//! tensor a `u32` length + name, a dtype byte (0 = f32, 1 = f64), a `u32`
//! rank, `u64` dims and the row-major payload.

use std::path::Path;

use super::graph::ParamStore;
use super::tensor::{DType, Float, Matrix};
use super::transformer::{ModelConfig, Transformer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LXB1";

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Float> {
    pub model: Transformer<T>,
    pub vocab_digest: String,
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn to_bytes<T: Float>(model: &Transformer<T>, vocab_digest: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.params().num_scalars() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    let config = format!("{}vocab_digest={vocab_digest}\n", model.config().to_kv());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_tag(T::DTYPE));
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols as u64).to_le_bytes());
        match T::DTYPE {
            DType::F32 => m
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes())),
            DType::F64 => m.data.iter().for_each(|v| out.extend_from_slice(&v.to_f64().to_le_bytes())),
        }
    }
    out
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn from_bytes<T: Float>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let text = c.string()?;
    let mut digest = None;
    let mut cfg_text = String::new();
    for line in text.lines() {
        match line.strip_prefix("vocab_digest=") {
            Some(d) => digest = Some(d.to_string()),
            None => {
                cfg_text.push_str(line);
                cfg_text.push('\n');
            }
        }
    }
    let vocab_digest = digest.ok_or_else(|| Error::Checkpoint("config lacks vocab_digest".into()))?;
    let config = ModelConfig::from_kv(&cfg_text)?;
    let count = c.u32()? as usize;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let name = c.string()?;
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        let dtype = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [r, k] => (r, k),
            _ => return Err(Error::Checkpoint(format!("tensor {name} has unsupported rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
        let data: Vec<T> = match dtype {
            0 => c
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            1 => c
                .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(8)
                .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
            t => return Err(Error::Checkpoint(format!("tensor {name} has unknown dtype tag {t}"))),
        };
        params.add(name, Matrix::from_vec(rows, cols, data));
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(Checkpoint {
        model: Transformer::from_params(config, params)?,
        vocab_digest,
    })
}

pub fn save<T: Float>(path: &Path, model: &Transformer<T>, vocab_digest: &str) -> Result<()> {
    std::fs::write(path, to_bytes(model, vocab_digest)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Transformer<f32> {
        Transformer::new(ModelConfig {
            layers: 1,
            model_dim: 8,
            ff_dim: 8,
            heads: 2,
            vocab_size: 10,
            target_size: 8,
            use_extra: true,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let a = to_bytes(&m, "abc");
        let back: Checkpoint<f32> = from_bytes(&a).unwrap();
        assert_eq!(back.vocab_digest, "abc");
        assert_eq!(back.model.params(), m.params());
        assert_eq!(to_bytes(&back.model, "abc"), a);
        assert_eq!(&a[..4], MAGIC);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let a = to_bytes(&model(), "d");
        assert!(from_bytes::<f32>(&a[..a.len() - 1]).is_err());
        let mut b = a.clone();
        b[0] = b'X';
        assert!(from_bytes::<f32>(&b).is_err());
        let mut c = a;
        c.push(0);
        assert!(from_bytes::<f32>(&c).is_err());
    }

    #[test]
    fn f64_payloads_load_into_f32_models() {
        let m = model();
        let wide = to_bytes(&m.cast::<f64>(), "d");
        let back: Checkpoint<f32> = from_bytes(&wide).unwrap();
        assert_eq!(back.model.params(), m.params());
    }
}
