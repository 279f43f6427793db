//! Binary checkpoint format.
//!
//! ```text
//! magic      b"AWUNETCK" + u32 version
//! config     8 x u32: levels, base_channels, valid_levels, in_channels,
//!            out_channels, input_shape[0..3]
//! epoch      u64
//! adam       u64 t, 4 x f64 (lr, beta1, beta2, eps)
//! params     u32 count; per tensor: u32 rank, rank x u32 dims, f32 data
//! moments    m then v: per tensor, f32 data (lengths follow the params)
//! trailer    SHA-256 of everything above
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::UNetModel;
use super::shape::UNetConfig;
use crate::error::{Error, Result};
use crate::tensor::{AdamHyper, AdamState, Tensor};

const MAGIC: &[u8; 8] = b"AWUNETCK";
/// Version written into every checkpoint header.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNetModel<f32>,
    pub optimizer: AdamState<f32>,
    pub epoch: u64,
}

pub fn save_checkpoint(
    model: &UNetModel<f32>,
    optimizer: &AdamState<f32>,
    epoch: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let params = model.parameters();
    if optimizer.m.len() != params.len() || optimizer.v.len() != params.len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = model.config();
    for v in [
        c.levels,
        c.base_channels,
        c.valid_levels,
        c.in_channels,
        c.out_channels,
        c.input_shape[0],
        c.input_shape[1],
        c.input_shape[2],
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&optimizer.t.to_le_bytes());
    let h = optimizer.hyper;
    for v in [h.lr, h.beta1, h.beta2, h.eps] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for d in p.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        put_f32s(&mut buf, p.data());
    }
    for (i, p) in params.iter().enumerate() {
        if optimizer.m[i].len() != p.len() || optimizer.v[i].len() != p.len() {
            return Err(Error::Checkpoint(format!("moment {i} length mismatch")));
        }
    }
    for m in &optimizer.m {
        put_f32s(&mut buf, m);
    }
    for v in &optimizer.v {
        put_f32s(&mut buf, v);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    buf.reserve(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Reads a checkpoint whatever its configuration.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut c = [0usize; 8];
    for v in c.iter_mut() {
        *v = r.u32()? as usize;
    }
    let config = UNetConfig {
        levels: c[0],
        base_channels: c[1],
        valid_levels: c[2],
        in_channels: c[3],
        out_channels: c[4],
        input_shape: [c[5], c[6], c[7]],
    };
    let epoch = r.u64()?;
    let t = r.u64()?;
    let hyper = AdamHyper {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape.iter().product();
        params.push(Tensor::new(shape, r.f32s(n)?)?);
    }
    let mut m = Vec::with_capacity(count);
    for p in &params {
        m.push(r.f32s(p.len())?);
    }
    let mut v = Vec::with_capacity(count);
    for p in &params {
        v.push(r.f32s(p.len())?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
    }
    let model = UNetModel::from_parameters(&config, params)
        .map_err(|e| Error::Checkpoint(format!("parameters do not fit the stored config: {e}")))?;
    Ok(Checkpoint {
        model,
        optimizer: AdamState { m, v, t, hyper },
        epoch,
    })
}

/// Reads a checkpoint and requires its architecture to equal `expected`.
/// The patch size may differ since it does not affect the parameters.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &UNetConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let got = ck.model.config();
    if got.levels != expected.levels
        || got.base_channels != expected.base_channels
        || got.valid_levels != expected.valid_levels
        || got.in_channels != expected.in_channels
        || got.out_channels != expected.out_channels
    {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has levels {} / base {} / valid {} / in {} / out {}, expected {} / {} / {} / {} / {}",
            got.levels,
            got.base_channels,
            got.valid_levels,
            got.in_channels,
            got.out_channels,
            expected.levels,
            expected.base_channels,
            expected.valid_levels,
            expected.in_channels,
            expected.out_channels
        )));
    }
    Ok(ck)
}
