//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoint layout: magic `SVPW`, version byte 1, entry count (u32 LE),
//! then per entry: name length (u32 LE), UTF-8 name, rank (u32 LE), dims
//! (u32 LE each), raw f32 LE values. Round-trips bit-exactly in f32 mode.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SVPW";
const VERSION: u8 = 1;

/// Named weights of all networks, iterated in sorted-name order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name '{name}'")));
        }
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn set(&mut self, name: &str, t: Tensor<S>) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count across all tensors.
    pub fn total_scalars(&self) -> u64 {
        self.map.values().map(|t| t.numel() as u64).sum()
    }

    /// Registers every tensor as a differentiable leaf on a tape.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundParams {
        let mut map = BTreeMap::new();
        for (name, t) in &self.map {
            map.insert(name.clone(), tape.leaf(t.clone()));
        }
        BoundParams { map }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&[VERSION])?;
        f.write_all(&(self.map.len() as u32).to_le_bytes())?;
        for (name, t) in &self.map {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                f.write_all(&v.to_f32().to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut f, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("not a checkpoint file (bad magic {magic:?})")));
        }
        let mut ver = [0u8; 1];
        read_exact(&mut f, &mut ver, "version")?;
        if ver[0] != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ver[0])));
        }
        let count = read_u32(&mut f, "entry count")?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut f, "name length")? as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut f, &mut name_buf, "name")?;
            let name = String::from_utf8(name_buf).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut f, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut f, "dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                read_exact(&mut f, &mut buf, "tensor data")?;
                data.push(S::from_f32(f32::from_le_bytes(buf)));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("unexpected end of checkpoint file reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Tape handles for every parameter of one training step.
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unbound parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}
