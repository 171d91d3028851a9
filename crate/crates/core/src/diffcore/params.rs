use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DRFTCKPT";
const VERSION: u32 = 1;

/// Named parameters plus matching gradient accumulators.
///
/// Backed by ordered maps so iteration order (and therefore checkpoint bytes
/// and optimizer updates) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Adds every gradient in `grads` whose name this store owns; others are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (name, g) in grads.iter() {
            if let Some(acc) = self.grads.get_mut(name) {
                acc.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub(crate) fn values_and_grads_mut(
        &mut self,
    ) -> impl Iterator<Item = (&String, &mut Tensor, &mut Tensor)> {
        self.values
            .iter_mut()
            .zip(self.grads.values_mut())
            .map(|((k, v), g)| (k, v, g))
    }

    /// Merges another store in; names must not collide.
    pub fn extend(&mut self, other: ParameterStore) -> Result<()> {
        for (name, value) in other.values {
            self.insert(name, value)?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, t) in &self.values {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("bad magic header"));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r).map_err(io)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r).map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 tensor name"))?;
            let ndim = read_u32(&mut r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(io)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::matrix(2, 2, vec![1.0, -0.1, 1e-300, f64::MAX]).unwrap())
            .unwrap();
        s.insert("b", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = ParameterStore::read_from(&buf[..]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::vector(vec![1.0])).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(ParameterStore::read_from(&corrupt[..]).is_err());
        assert!(ParameterStore::read_from(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }
}
