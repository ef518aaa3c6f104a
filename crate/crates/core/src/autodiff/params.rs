use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::io::{read_str, read_tensor, read_u32, write_str, write_tensor};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XNNP";
const VERSION: u32 = 1;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Inserts a tensor drawn uniformly from `±sqrt(1 / fan_in)`.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::random(shape, rng)?.scale(bound);
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|_| 0.0)))
                .collect(),
        }
    }

    /// `self += s * other` over matching names.
    pub fn add_scaled(&mut self, other: &ParamStore, s: f64) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let o = other.get(name)?;
            t.expect_same_shape(o)?;
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += s * b;
            }
        }
        Ok(())
    }

    /// Writes an `XNNP` checkpoint: magic, `u32` version, a `u32`-prefixed
    /// UTF-8 metadata block, a `u32` record count, then per record a
    /// `u32`-prefixed UTF-8 name followed by an `XNNT` tensor.
    pub fn write(&self, w: &mut impl Write, meta: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, meta)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            write_str(w, name)?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::write`], returning the
    /// store and its metadata block.
    pub fn read(r: &mut impl Read) -> Result<(Self, String)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("XNNP", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::format("XNNP", format!("unsupported version {version}")));
        }
        let meta = read_str(r, "XNNP")?;
        let count = read_u32(r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let name = read_str(r, "XNNP")?;
            let t = read_tensor(r)?;
            store
                .insert(name, t)
                .map_err(|e| Error::format("XNNP", e.to_string()))?;
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &str) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w, meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut s = ParamStore::new();
        s.init_uniform("b.w", &[3, 2, 4], 6, &mut rng).unwrap();
        s.init_uniform("a.b", &[4], 6, &mut rng).unwrap();
        s
    }

    #[test]
    fn keeps_insertion_order_and_counts() {
        let s = sample();
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b.w", "a.b"]);
        assert_eq!(s.param_count(), 28);
        let bound = (1.0f64 / 6.0).sqrt();
        assert!(s.iter().all(|(_, t)| t.max_abs() <= bound));
    }

    #[test]
    fn same_seed_same_store() {
        assert_eq!(sample(), sample());
    }

    #[test]
    fn rejects_duplicates_and_unknown_names() {
        let mut s = sample();
        assert!(s.insert("a.b", Tensor::scalar(0.0)).is_err());
        assert!(matches!(s.get("nope"), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = sample();
        let mut buf = Vec::new();
        s.write(&mut buf, "kind=sxcnn\n").unwrap();
        assert_eq!(&buf[..4], b"XNNP");
        let (back, meta) = ParamStore::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta, "kind=sxcnn\n");
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read(&mut buf.as_slice()).is_err());
    }
}
