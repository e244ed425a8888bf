//! Named parameter collections and the `TALW` checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TALW" | u32 version
//! repeated until EOF:
//!   u32 name_len | name (UTF-8) | u32 rank | u32 extent × rank | f64 × product(extents)
//! ```
//!
//! Records are written in name order, so equal parameter sets produce equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const TALW_MAGIC: &[u8; 4] = b"TALW";
pub const TALW_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| invalid!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`, prefix kept.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// Fails unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for (name, t) in &self.entries {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::shape("checkpoint parameter", t.shape(), o.shape()));
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(invalid!("unexpected parameter `{extra}`"));
        }
        Ok(())
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Gradients of every bound parameter, in name order.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|(k, v)| {
                g.grad(bound.vars[k])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.num_scalars() * 8);
        out.extend_from_slice(TALW_MAGIC);
        out.extend_from_slice(&TALW_VERSION.to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != TALW_MAGIC {
            return Err(Error::format(path, format!("bad magic {magic:?}, expected \"TALW\"")));
        }
        let version = r.u32()?;
        if version != TALW_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let mut set = ParamSet::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::format(path, format!("parameter name: {e}")))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.insert(name, Tensor::new(shape, data)?);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid!("parameter `{name}` not bound"))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated payload at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
