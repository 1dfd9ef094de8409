use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, iterated in insertion order.
#[derive(Debug)]
pub struct ParamSet {
    set_id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        ParamSet {
            set_id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            set_id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn set_id(&self) -> u64 {
        self.set_id
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        t.set_requires_grad(true);
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Glorot-uniform weight: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Stop gradient accumulation for every parameter and drop existing grads.
    pub fn freeze(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(false));
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors.iter().all(|t| !t.requires_grad())
    }

    pub fn has_any_grad(&self) -> bool {
        self.tensors.iter().any(|t| t.grad().is_some())
    }

    pub(crate) fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// SHA-256 over names, shapes and the bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Named-NT1 checkpoint: for each parameter a name line then its NT1 block.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        for (_, name, t) in self.iter() {
            out.push_str(name);
            out.push('\n');
            out.push_str(&t.to_nt1());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_checkpoint(text: &str, origin: &str) -> Result<Vec<(String, Tensor)>> {
        let mut lines = text.lines().enumerate().peekable();
        let mut entries = Vec::new();
        while let Some((_, name)) = lines.next() {
            if name.trim().is_empty() {
                continue;
            }
            let t = Tensor::read_nt1_lines(&mut lines, origin)?;
            entries.push((name.trim().to_string(), t));
        }
        Ok(entries)
    }

    /// Overwrite values from a checkpoint whose names and shapes must match
    /// this set exactly.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = Self::parse_checkpoint(&text, &path.display().to_string())?;
        self.assign(entries)
    }

    pub fn assign(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} tensors, architecture expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::config(format!("checkpoint tensor {name:?} not in architecture")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor {name:?} has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = ParamSet::new();
        p.insert_zeros("b", &[2]).unwrap();
        p.insert_zeros("a", &[3]).unwrap();
        assert!(p.insert_zeros("a", &[1]).is_err());
        let names: Vec<_> = p.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let id = p.insert_glorot("w", &[8, 4, 3, 3], 36, 72, &mut rng).unwrap();
        let a = (6.0f64 / 108.0).sqrt();
        assert!(p.get(id).data().iter().all(|v| v.abs() < a));
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.insert_glorot("conv.w", &[2, 1, 3, 3], 9, 18, &mut rng).unwrap();
        p.insert_zeros("conv.b", &[2]).unwrap();
        let text = p.to_checkpoint();
        let mut q = ParamSet::new();
        q.insert_zeros("conv.w", &[2, 1, 3, 3]).unwrap();
        q.insert_zeros("conv.b", &[2]).unwrap();
        q.assign(ParamSet::parse_checkpoint(&text, "mem").unwrap()).unwrap();
        assert_eq!(p.fingerprint(), q.fingerprint());

        let mut r = ParamSet::new();
        r.insert_zeros("conv.w", &[2, 1, 5, 5]).unwrap();
        r.insert_zeros("conv.b", &[2]).unwrap();
        let err = r.assign(ParamSet::parse_checkpoint(&text, "mem").unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
