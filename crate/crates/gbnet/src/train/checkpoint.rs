//! Binary checkpoint files.
//!
//! Layout: magic `GBNET1` (6 bytes), u32 LE tensor count, then per
//! tensor: u16 LE name length, UTF-8 name, u8 rank, rank u32 LE dims,
//! row-major f32 LE data; trailing u32 LE CRC32 of everything between
//! the magic and the checksum. Values are stored at 32-bit precision.
//!
//! Stored tensors: `meta.dims` (model shape), `adam.hyper`, `adam.step`,
//! every model parameter under its canonical name, and `adam.m.<name>` /
//! `adam.v.<name>` moment pairs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{GbError, Result};
use crate::model::{ModelDims, ModelParams};
use crate::tensor::Tensor;

use super::AdamState;

const MAGIC: &[u8; 6] = b"GBNET1";

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    if t.cols() == 1 {
        buf.push(1);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    } else {
        buf.push(2);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    }
    for &v in t.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn dims_tensor(dims: &ModelDims) -> Tensor {
    let v: Vec<f64> = [
        dims.d,
        dims.hidden,
        dims.t_steps,
        dims.k_bridge,
        dims.in_dims[0],
        dims.in_dims[1],
        dims.in_dims[2],
        dims.in_dims[3],
        dims.slot_counts[0],
        dims.slot_counts[1],
        dims.slot_counts[2],
        dims.slot_counts[3],
    ]
    .iter()
    .map(|&x| x as f64)
    .collect();
    Tensor::vector(&v)
}

pub fn save_checkpoint(params: &ModelParams, adam: &AdamState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let count = 3 + 3 * params.n_tensors();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    push_tensor(&mut buf, "meta.dims", &dims_tensor(&params.dims));
    push_tensor(
        &mut buf,
        "adam.hyper",
        &Tensor::vector(&[adam.lr, adam.beta1, adam.beta2, adam.eps]),
    );
    push_tensor(&mut buf, "adam.step", &Tensor::vector(&[adam.step as f64]));
    for id in 0..params.n_tensors() {
        let name = ModelParams::tensor_name(id);
        push_tensor(&mut buf, &name, params.tensor(id));
        push_tensor(&mut buf, &format!("adam.m.{}", name), &adam.m[id]);
        push_tensor(&mut buf, &format!("adam.v.{}", name), &adam.v[id]);
    }
    let crc = crc32fast::hash(&buf[MAGIC.len()..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(GbError::Format("checkpoint truncated".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_tensors(data: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if data.len() < MAGIC.len() + 8 {
        return Err(GbError::Format("checkpoint truncated".into()));
    }
    if &data[..MAGIC.len()] != MAGIC {
        return Err(GbError::Format("bad checkpoint magic".into()));
    }
    let payload = &data[MAGIC.len()..data.len() - 4];
    let crc_stored = u32::from_le_bytes(data[data.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != crc_stored {
        return Err(GbError::Format(format!(
            "checkpoint CRC mismatch: stored {:08x}, computed {:08x}",
            crc_stored, crc
        )));
    }
    let mut r = Reader { data: payload, pos: 0 };
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| GbError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()?;
        let (rows, cols) = match rank {
            1 => (r.u32()? as usize, 1),
            2 => (r.u32()? as usize, r.u32()? as usize),
            _ => return Err(GbError::Format(format!("tensor '{}' has rank {}", name, rank))),
        };
        let n = rows * cols;
        let bytes = r.take(4 * n)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.insert(name, Tensor::from_vec(rows, cols, data)?);
    }
    if r.pos != payload.len() {
        return Err(GbError::Format("trailing bytes after tensors".into()));
    }
    Ok(out)
}

fn dims_from_tensor(t: &Tensor) -> Result<ModelDims> {
    if t.len() != 12 {
        return Err(GbError::Format("meta.dims must have 12 entries".into()));
    }
    let v: Vec<usize> = t.as_slice().iter().map(|&x| x as usize).collect();
    Ok(ModelDims {
        d: v[0],
        hidden: v[1],
        t_steps: v[2],
        k_bridge: v[3],
        in_dims: [v[4], v[5], v[6], v[7]],
        slot_counts: [v[8], v[9], v[10], v[11]],
    })
}

/// Expected-shape table for a given model shape.
fn expected_shape(dims: &ModelDims, id: usize) -> (usize, usize) {
    let per = crate::model::KIND_FIELDS.len();
    let kind = id / per;
    let (d, h) = (dims.d, dims.hidden);
    let recv_in = d * dims.slot_counts[kind];
    match id % per {
        0 => (d, dims.in_dims[kind]),
        1 => (d, 1),
        2 => (h, d),
        3 => (h, 1),
        4 => (d, h),
        5 => (d, 1),
        6 => (h, recv_in),
        7 => (h, 1),
        8 => (d, h),
        9 => (d, 1),
        10 => (h, d),
        11 => (h, 1),
        12 => (d, h),
        13 => (d, 1),
        _ => (d, d),
    }
}

/// Check every parameter tensor against the shapes implied by `dims`;
/// errors name the first offending tensor.
pub fn validate_shapes(params: &ModelParams, dims: &ModelDims) -> Result<()> {
    for id in 0..params.n_tensors() {
        let want = expected_shape(dims, id);
        let t = params.tensor(id);
        if (t.rows(), t.cols()) != want {
            return Err(GbError::Shape(format!(
                "tensor '{}' is {}x{}, expected {}x{}",
                ModelParams::tensor_name(id),
                t.rows(),
                t.cols(),
                want.0,
                want.1
            )));
        }
    }
    Ok(())
}

/// Load a checkpoint. When `expected` is given, the stored shapes must
/// match it exactly (e.g. the run configuration of an eval command).
pub fn load_checkpoint(path: &Path, expected: Option<&ModelDims>) -> Result<(ModelParams, AdamState)> {
    let data = std::fs::read(path)?;
    let mut tensors = read_tensors(&data)?;
    let dims = dims_from_tensor(
        tensors
            .get("meta.dims")
            .ok_or_else(|| GbError::Format("checkpoint missing meta.dims".into()))?,
    )?;

    let mut params = ModelParams::init_random(&dims, 0);
    for id in 0..params.n_tensors() {
        let name = ModelParams::tensor_name(id);
        let t = tensors
            .remove(&name)
            .ok_or_else(|| GbError::Format(format!("checkpoint missing tensor '{}'", name)))?;
        let want = expected_shape(expected.unwrap_or(&dims), id);
        if (t.rows(), t.cols()) != want {
            return Err(GbError::Shape(format!(
                "tensor '{}' is {}x{}, expected {}x{}",
                name,
                t.rows(),
                t.cols(),
                want.0,
                want.1
            )));
        }
        *params.tensor_mut(id) = t;
    }
    if let Some(exp) = expected {
        if dims != *exp {
            return Err(GbError::Shape(format!(
                "checkpoint dims {:?} do not match expected {:?}",
                dims, exp
            )));
        }
    }

    let hyper = tensors
        .get("adam.hyper")
        .ok_or_else(|| GbError::Format("checkpoint missing adam.hyper".into()))?;
    if hyper.len() != 4 {
        return Err(GbError::Format("adam.hyper must have 4 entries".into()));
    }
    let step = tensors
        .get("adam.step")
        .ok_or_else(|| GbError::Format("checkpoint missing adam.step".into()))?
        .as_slice()[0] as u64;
    let mut adam = AdamState::new(
        &params,
        hyper.as_slice()[0],
        hyper.as_slice()[1],
        hyper.as_slice()[2],
        hyper.as_slice()[3],
    );
    adam.step = step;
    for id in 0..params.n_tensors() {
        let name = ModelParams::tensor_name(id);
        for (prefix, slot) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            let key = format!("{}{}", prefix, name);
            let t = tensors
                .remove(&key)
                .ok_or_else(|| GbError::Format(format!("checkpoint missing tensor '{}'", key)))?;
            if (t.rows(), t.cols()) != (params.tensor(id).rows(), params.tensor(id).cols()) {
                return Err(GbError::Shape(format!("tensor '{}' has wrong shape", key)));
            }
            slot[id] = t;
        }
    }
    Ok((params, adam))
}
