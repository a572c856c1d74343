//! Model checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SERM" | version u8 | variant id u8 | block count u32 | blocks...
//! [ optimizer block count u32 | blocks... ]          (optional)
//! block = name length u32 | name bytes | rank u8 | rank × u32 dims | f32 payload
//! ```
//!
//! Parameter blocks carry every trainable tensor under its store name plus
//! batch-norm running statistics as `<name>.running_mean` / `.running_var`.
//! Optimizer blocks carry `<name>.sq_grad` / `<name>.sq_delta`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SERM_MAGIC: &[u8; 4] = b"SERM";
pub const SERM_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Block {
    fn from_tensor<T: Scalar>(name: String, t: &Tensor<T>) -> Self {
        Self {
            name,
            dims: t.dims().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    fn from_slice<T: Scalar>(name: String, v: &[T]) -> Self {
        Self {
            name,
            dims: vec![v.len()],
            data: v.iter().map(|x| x.as_f64() as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant_id: u8,
    pub params: Vec<Block>,
    pub optimizer: Option<Vec<Block>>,
}

fn write_block(out: &mut Vec<u8>, b: &Block) {
    out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
    out.extend_from_slice(b.name.as_bytes());
    out.push(b.dims.len() as u8);
    for &d in &b.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &b.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn block(&mut self) -> Result<Block> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::format("checkpoint", "block name is not UTF-8"))?
            .to_string();
        let rank = self.u8()? as usize;
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let payload = self.take(count * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Block { name, dims, data })
    }

    fn blocks(&mut self) -> Result<Vec<Block>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.block()).collect()
    }
}

impl Checkpoint {
    /// Snapshot a parameter store.
    pub fn from_store<T: Scalar>(variant_id: u8, store: &ParamStore<T>, with_optimizer: bool) -> Self {
        let mut params: Vec<Block> = store
            .params()
            .iter()
            .map(|p| Block::from_tensor(p.name.clone(), &p.value))
            .collect();
        for s in store.all_stats() {
            params.push(Block::from_slice(format!("{}.running_mean", s.name), &s.mean));
            params.push(Block::from_slice(format!("{}.running_var", s.name), &s.var));
        }
        let optimizer = with_optimizer.then(|| {
            store
                .params()
                .iter()
                .flat_map(|p| {
                    [
                        Block::from_tensor(format!("{}.sq_grad", p.name), &p.sq_grad),
                        Block::from_tensor(format!("{}.sq_delta", p.name), &p.sq_delta),
                    ]
                })
                .collect()
        });
        Self {
            variant_id,
            params,
            optimizer,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.params.iter().find(|b| b.name == name)
    }

    /// Copy every stored tensor into a store with the same layout.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let index: HashMap<&str, &Block> = self.params.iter().map(|b| (b.name.as_str(), b)).collect();
        let fetch = |name: &str, dims: &[usize]| -> Result<&Block> {
            let b = index
                .get(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing block '{name}'")))?;
            if b.dims != dims {
                return Err(Error::format(
                    "checkpoint",
                    format!("block '{name}' has dims {:?}, expected {:?}", b.dims, dims),
                ));
            }
            Ok(b)
        };
        let expected = store.params().len() + 2 * store.all_stats().len();
        if self.params.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!("{} parameter blocks, model expects {expected}", self.params.len()),
            ));
        }
        for p in store.params_mut() {
            let b = fetch(&p.name, p.value.dims())?;
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&b.data) {
                *dst = T::from_f64(src as f64);
            }
        }
        for s in store.all_stats_mut() {
            let n = s.mean.len();
            let mean = fetch(&format!("{}.running_mean", s.name), &[n])?;
            let var = fetch(&format!("{}.running_var", s.name), &[n])?;
            for i in 0..n {
                s.mean[i] = T::from_f64(mean.data[i] as f64);
                s.var[i] = T::from_f64(var.data[i] as f64);
            }
        }
        if let Some(opt) = &self.optimizer {
            let oindex: HashMap<&str, &Block> = opt.iter().map(|b| (b.name.as_str(), b)).collect();
            for p in store.params_mut() {
                for (suffix, target) in [("sq_grad", &mut p.sq_grad), ("sq_delta", &mut p.sq_delta)] {
                    let name = format!("{}.{suffix}", p.name);
                    let b = oindex
                        .get(name.as_str())
                        .ok_or_else(|| Error::format("checkpoint", format!("missing block '{name}'")))?;
                    if b.dims != target.dims() {
                        return Err(Error::format("checkpoint", format!("block '{name}' has wrong dims")));
                    }
                    for (dst, &src) in target.data_mut().iter_mut().zip(&b.data) {
                        *dst = T::from_f64(src as f64);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SERM_MAGIC);
        out.push(SERM_VERSION);
        out.push(self.variant_id);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for b in &self.params {
            write_block(&mut out, b);
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&(opt.len() as u32).to_le_bytes());
            for b in opt {
                write_block(&mut out, b);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != SERM_MAGIC {
            return Err(Error::format("checkpoint", "missing SERM magic"));
        }
        let version = r.u8()?;
        if version != SERM_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let variant_id = r.u8()?;
        let params = r.blocks()?;
        let optimizer = if r.done() { None } else { Some(r.blocks()?) };
        if !r.done() {
            return Err(Error::format("checkpoint", "trailing bytes after optimizer state"));
        }
        Ok(Self {
            variant_id,
            params,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
