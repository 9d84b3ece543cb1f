//! Named-tensor container with a small little-endian binary format.
//!
//! ```text
//! magic    4 bytes  "RSFC"
//! version  u32
//! count    u32
//! entries  count × {
//!     name_len u32, name (UTF-8),
//!     dtype    u8 (0 = float32, 1 = float64),
//!     rank     u32, dims rank × u64,
//!     bytes    u64, payload (row-major values)
//! }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Parameters, Tensor};

pub const MAGIC: [u8; 4] = *b"RSFC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    /// Every tensor yielded by `params`, parameters and buffers alike.
    pub fn from_params(params: &dyn Parameters) -> Self {
        let mut ck = Checkpoint::new();
        params.visit("", &mut |name, t, _| ck.entries.push((name.to_string(), t.detach())));
        ck
    }

    /// Adds an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let name = name.into();
        if self.contains(&name) {
            return Err(Error::invalid(format!("checkpoint: duplicate entry {name:?}")));
        }
        self.entries.push((name, t.detach()));
        Ok(())
    }

    /// Adds or replaces an entry.
    pub fn set(&mut self, name: &str, t: &Tensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t.detach(),
            None => self.entries.push((name.to_string(), t.detach())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrites every tensor of `params` with the entry of the same name,
    /// keeping dtype and tracking. Shapes must agree.
    pub fn load_into(&self, params: &mut dyn Parameters) -> Result<()> {
        let mut failure = None;
        params.visit_mut("", &mut |name, slot, _| {
            if failure.is_some() {
                return;
            }
            let result = self.get(name).and_then(|t| {
                if t.shape() != slot.shape() {
                    return Err(Error::Corrupt(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                let fresh = Tensor::with_dtype(t.shape(), t.to_vec(), slot.dtype())?;
                Ok(if slot.is_tracked() { fresh.tracked() } else { fresh })
            });
            match result {
                Ok(t) => *slot = t,
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match t.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.numel() * t.dtype().size_in_bytes()) as u64).to_le_bytes());
            match t.dtype() {
                DType::F32 => t.values().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t.values().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("entry count")?;
        let mut ck = Checkpoint::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Corrupt(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let dtype = match r.take(1, "dtype")?[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(Error::Corrupt(format!("{name}: unknown dtype tag {other}"))),
            };
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let declared = r.u64("payload size")?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let expected = numel.and_then(|n| n.checked_mul(dtype.size_in_bytes()));
            if expected != Some(declared as usize) || shape.contains(&0) {
                return Err(Error::Corrupt(format!(
                    "{name}: shape {shape:?} of {dtype} does not match {declared} payload bytes"
                )));
            }
            let payload = r.take(declared as usize, &name)?;
            let values: Vec<f64> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let t = Tensor::with_dtype(&shape, values, dtype).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
            ck.insert(name, &t).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
