//! Named-tensor binary checkpoints.
//!
//! Layout, all integers little-endian: `b"DIAU"`, `u32` version, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64`
//! per dimension, and row-major `f32` data.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::intent::{IntentBank, ModelState, PARAM_NAMES};
use crate::semantic::{Activation, ProjectorParams};

pub const MAGIC: &[u8; 4] = b"DIAU";
pub const VERSION: u32 = 1;

pub fn encode_tensors(tensors: &[(&str, &Array2<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        for dim in [t.nrows(), t.ncols()] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Array2<f64>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}, expected 2")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data: Vec<f64> = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Array2::from_shape_vec((rows, cols), data).expect("size checked")));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

pub fn encode_model(state: &ModelState) -> Vec<u8> {
    let eta = scalar(state.bank.eta);
    let kappa = scalar(state.bank.kappa);
    let act = scalar(match state.projector.activation {
        Activation::Tanh => 0.0,
        Activation::Identity => 1.0,
    });
    let mut tensors: Vec<(&str, &Array2<f64>)> = PARAM_NAMES.iter().copied().zip(state.params()).collect();
    tensors.push(("eta", &eta));
    tensors.push(("kappa", &kappa));
    tensors.push(("projector.activation", &act));
    encode_tensors(&tensors)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelState> {
    let mut tensors = decode_tensors(bytes)?;
    let mut take = |name: &str| -> Result<Array2<f64>> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        Ok(tensors.swap_remove(i).1)
    };
    let user_mu = take("user_mu")?;
    let item_mu = take("item_mu")?;
    let proto_bank = take("proto_bank")?;
    let dist_bank = take("dist_bank")?;
    let dist_proj = take("dist_proj")?;
    let w1 = take("projector.w1")?;
    let b1 = take("projector.b1")?;
    let w2 = take("projector.w2")?;
    let b2 = take("projector.b2")?;
    let coarse_map = take("coarse_map")?;
    let eta = take("eta")?[[0, 0]];
    let kappa = take("kappa")?[[0, 0]];
    let activation = if take("projector.activation")?[[0, 0]] == 0.0 {
        Activation::Tanh
    } else {
        Activation::Identity
    };
    let d = user_mu.ncols();
    let consistent = item_mu.ncols() == d
        && proto_bank.ncols() == d
        && dist_bank.dim() == proto_bank.dim()
        && dist_proj.dim() == proto_bank.dim()
        && b1.dim() == (1, w1.ncols())
        && w2.nrows() == w1.ncols()
        && w2.ncols() == d
        && b2.dim() == (1, d)
        && coarse_map.dim() == (d, d);
    if !consistent {
        return Err(Error::Format("checkpoint tensor shapes are inconsistent".into()));
    }
    Ok(ModelState {
        user_mu,
        item_mu,
        bank: IntentBank { proto_bank, dist_bank, dist_proj, eta, kappa },
        projector: ProjectorParams { w1, b1, w2, b2, activation },
        coarse_map,
    })
}

pub fn save_model(path: &Path, state: &ModelState) -> Result<()> {
    fs::write(path, encode_model(state)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
