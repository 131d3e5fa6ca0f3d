use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Ordered collection of named tensors.
///
/// Entry order is part of the identity of a parameter set: two sets are
/// compatible only if their names and shapes agree position by position.
/// [`flatten`](ParamSet::flatten) concatenates the entries in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Inverse of [`flatten`](ParamSet::flatten) using `template` for names and shapes.
    pub fn unflatten(values: &[f64], template: &ParamSet) -> Result<ParamSet> {
        if values.len() != template.total_len() {
            return Err(Error::Internal(format!(
                "cannot unflatten {} values into a template of {}",
                values.len(),
                template.total_len()
            )));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(template.len());
        for (name, t) in &template.entries {
            let n = t.len();
            let tensor = Tensor::new(t.shape().to_vec(), values[offset..offset + n].to_vec())?;
            entries.push((name.clone(), tensor));
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    /// Binary layout: entry count, then per entry the name length, name
    /// bytes, rank and dimensions, all as little-endian `u64`; followed by
    /// every value as little-endian `f64` in flatten order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.total_len());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut cur = Cursor { bytes, pos: 0 };
        let count = cur.u64()? as usize;
        let mut layout = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = cur.u64()? as usize;
            let at = cur.pos;
            let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                message: "entry name is not UTF-8".into(),
            })?;
            let rank = cur.u64()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            layout.push((name, shape));
        }
        let mut entries = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(cur.array()?));
            }
            entries.push((name, Tensor::new(shape, values)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                offset: cur.pos,
                message: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Ok(ParamSet { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated: wanted {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array(&mut self) -> Result<[u8; 8]> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(a)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
