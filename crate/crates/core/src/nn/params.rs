//! Learnable-parameter storage and checkpoint serialization.
//!
//! Parameters are named, shaped `f64` buffers owned by a [`ParamStore`].
//! Graphs bind them per forward pass, optimizers mutate them in place.
//!
//! # Checkpoint container
//!
//! Checkpoints are a flat, ordered list of records in a little-endian binary
//! file:
//!
//! ```text
//! magic   8 bytes  b"SNLDSPR1"
//! version u32      currently 1
//! count   u64      number of parameter records
//! record  repeated count times, in store order:
//!     name_len u32
//!     name     utf-8 bytes
//!     rows     u64
//!     cols     u64
//!     values   rows*cols f64, row-major
//! ```
//!
//! Values round-trip bit-exactly.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::Shape;

const MAGIC: &[u8; 8] = b"SNLDSPR1";
const VERSION: u32 = 1;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f64>,
}

/// Ordered collection of named learnable parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.index()]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.index()].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.index()].values
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn add(&mut self, name: &str, shape: Shape, values: Vec<f64>) -> ParamId {
        assert_eq!(shape.len(), values.len(), "parameter shape/value mismatch");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len() as u32);
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            values,
        });
        id
    }

    pub fn add_zeros(&mut self, name: &str, shape: Shape) -> ParamId {
        let values = vec![0.0; shape.len()];
        self.add(name, shape, values)
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))` for a `(rows, cols)`
    /// linear map taking `cols` inputs to `rows` outputs.
    pub fn add_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Shape::matrix(rows, cols), values)
    }

    pub fn add_const(&mut self, name: &str, shape: Shape, value: f64) -> ParamId {
        let values = vec![value; shape.len()];
        self.add(name, shape, values)
    }

    /// Overwrite values from another store, matching by name.
    ///
    /// Fails if a parameter is missing or has a different shape.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let src = other.lookup(&name).ok_or_else(|| {
                Error::format(format!("checkpoint missing parameter {name}"))
            })?;
            let src_entry = other.entry(src);
            if src_entry.shape != self.entries[i].shape {
                return Err(Error::format(format!(
                    "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                    src_entry.shape, self.entries[i].shape
                )));
            }
            self.entries[i].values.copy_from_slice(&src_entry.values);
        }
        Ok(())
    }

    // ---- checkpoint io ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.shape.rows as u64).to_le_bytes())?;
            w.write_all(&(e.shape.cols as u64).to_le_bytes())?;
            for v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a parameter checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format("parameter name is not utf-8"))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format("parameter shape overflow"))?;
            let mut values = vec![0.0f64; len];
            let mut buf = [0u8; 8];
            for v in values.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            store.add(&name, Shape::matrix(rows, cols), values);
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.add_glorot("w0", 3, 5, &mut rng);
        store.add_zeros("b0", Shape::vector(3));
        store.add(
            "odd",
            Shape::vector(4),
            vec![f64::MIN_POSITIVE, -0.0, 1.0e308, std::f64::consts::PI],
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();

        assert_eq!(loaded.len(), store.len());
        for (a, b) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.values.len(), b.values.len());
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTAPARM0000").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn glorot_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add_glorot("w", 10, 30, &mut rng);
        let bound = (6.0 / 40.0f64).sqrt();
        assert!(store.values(id).iter().all(|v| v.abs() < bound));
    }
}
