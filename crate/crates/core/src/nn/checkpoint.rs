//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `GFADCKPT` magic, u32 version, u32 arch id, u64 seed, arch extras,
//! u32 tensor count, then per tensor u32 rank, rank × u32 dims and the
//! values as f64. Values are widened to f64 on save so a checkpoint written
//! by an f32 model can be read by an f64 one and vice versa.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Activation, Arch, ModelState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GFADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ARCH_MLP_FASHION: u32 = 1;
const ARCH_CNN_CIFAR10: u32 = 2;
const ARCH_MLP: u32 = 3;

pub fn save_checkpoint<S: Scalar>(model: &ModelState<S>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    match &model.arch {
        Arch::MlpFashion => buf.extend_from_slice(&ARCH_MLP_FASHION.to_le_bytes()),
        Arch::CnnCifar10 => buf.extend_from_slice(&ARCH_CNN_CIFAR10.to_le_bytes()),
        Arch::Mlp { .. } => buf.extend_from_slice(&ARCH_MLP.to_le_bytes()),
    }
    buf.extend_from_slice(&model.seed.to_le_bytes());
    if let Arch::Mlp { dims, activation, bias } = &model.arch {
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(activation.code());
        buf.push(u8::from(*bias));
    }
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        buf.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            buf.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        what: path.display().to_string(),
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(8, format!("unsupported version {version}")));
    }
    let arch_at = r.pos;
    let arch_id = r.u32()?;
    let seed = r.u64()?;
    let arch = match arch_id {
        ARCH_MLP_FASHION => Arch::MlpFashion,
        ARCH_CNN_CIFAR10 => Arch::CnnCifar10,
        ARCH_MLP => {
            let n = r.u32()? as usize;
            let dims = (0..n)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.pos;
            let activation = Activation::from_code(r.u8()?).ok_or_else(|| r.fail(at, "bad activation code"))?;
            let bias = r.u8()? != 0;
            Arch::Mlp { dims, activation, bias }
        }
        other => return Err(r.fail(arch_at, format!("unknown architecture id {other}"))),
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes"));
    }
    ModelState::with_params(arch, params, seed)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what.clone(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(self.pos, "unexpected end of file"));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
