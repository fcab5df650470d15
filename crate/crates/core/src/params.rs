//! Named parameter storage, gradient buffers, and the binary checkpoint
//! format.
//!
//! Slots keep their registration order, which fixes the iteration order for
//! optimizer updates and the record order inside checkpoints, so identical
//! runs produce byte-identical checkpoint files.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a registered parameter slot. Cheap to copy; only valid for the
/// store that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotId(pub(crate) usize);

struct Slot<T> {
    name: String,
    value: Tensor<T>,
}

/// Ordered collection of named parameter tensors.
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            slots: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name and returns its handle.
    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<SlotId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter slot '{name}'")));
        }
        let id = SlotId(self.slots.len());
        self.index.insert(name.to_string(), id.0);
        self.slots.push(Slot {
            name: name.to_string(),
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar entries across all slots.
    pub fn num_entries(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn get(&self, id: SlotId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: SlotId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn name(&self, id: SlotId) -> &str {
        &self.slots[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<SlotId> {
        self.index.get(name).copied().map(SlotId)
    }

    /// Iterates slots in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (SlotId, &str, &Tensor<T>)> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| (SlotId(i), s.name.as_str(), &s.value))
    }

    pub fn ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.slots.len()).map(SlotId)
    }

    /// Snapshot of all values, aligned with slot order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    /// Restores values from a snapshot taken on this store.
    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.slots.len(), "snapshot size mismatch");
        for (slot, t) in self.slots.iter_mut().zip(snapshot.iter()) {
            slot.value = t.clone();
        }
    }

    /// FNV-1a hash over slot names, shapes and value bit patterns. Used to
    /// assert parameter equality across training phases and runs.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for slot in &self.slots {
            eat(slot.name.as_bytes());
            for &d in slot.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in slot.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Per-slot gradient accumulators aligned with a [`ParamStore`].
///
/// Kept separate from the store so that batch workers can accumulate into
/// private buffers that are merged in a fixed order afterwards.
#[derive(Clone)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            grads: store
                .slots
                .iter()
                .map(|s| Tensor::zeros(s.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: SlotId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: SlotId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    /// `self += other`, slotwise.
    pub fn add_from(&mut self, other: &Gradients<T>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.add_scaled(b, T::one());
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Returns the index of the first slot holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.grads.iter().position(|g| !g.all_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }
}

/// Draws a matrix with entries uniform in ±√(6/(fan_in+fan_out)).
///
/// Values are sampled in `f64` and converted, so the draw sequence is
/// identical across precisions.
pub fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64(rng.gen_range(-bound..=bound));
    }
    t
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MSRC";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes all slots as one named record each: name length, name bytes,
/// rank, dimensions, then the values as little-endian `f32`. Record order is
/// slot registration order.
pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, name, value) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u64).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&checkpoint_bytes(store))?;
    w.flush()?;
    Ok(())
}

fn read_exact_buf<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let b = read_exact_buf(r, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

/// Reads a checkpoint as a list of named tensors.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact_buf(&mut r, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = u32::from_le_bytes(read_exact_buf(&mut r, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u64(&mut r, "record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r, "name length")? as usize;
        let name = String::from_utf8(read_exact_buf(&mut r, name_len, "name")?)
            .map_err(|_| Error::Format("checkpoint slot name is not UTF-8".into()))?;
        let rank = read_u64(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = read_exact_buf(&mut r, len * 4, "values")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(records)
}

/// Loads a checkpoint into an existing store, requiring an exact match of
/// slot names and shapes. Errors name the offending slot.
pub fn load_checkpoint(store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
    let records = read_checkpoint(path)?;
    if records.len() != store.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} slots but the model expects {}",
            records.len(),
            store.len()
        )));
    }
    for (name, tensor) in records {
        let id = store.find(&name).ok_or_else(|| {
            Error::Invalid(format!("checkpoint slot '{name}' is unknown to the model"))
        })?;
        let expected = store.get(id).shape().to_vec();
        if expected != tensor.shape() {
            return Err(Error::Invalid(format!(
                "shape mismatch for slot '{name}': checkpoint {:?}, model {:?}",
                tensor.shape(),
                expected
            )));
        }
        *store.get_mut(id) = tensor;
    }
    Ok(())
}
