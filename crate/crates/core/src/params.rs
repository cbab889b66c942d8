//! Named parameter storage, initialization and checkpoints.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{format_err, invalid, Error, Result};
use crate::tensor::{read_blob, write_blob, DiffTensor, RunningStatUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for. L1 regularization only touches `Conv`;
/// `Buffer` entries (batch-norm running statistics) are never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Conv,
    Dense,
    Norm,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub tensor: DiffTensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, tensor: DiffTensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            trainable: kind != ParamKind::Buffer,
            tensor,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &DiffTensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Freezes or unfreezes every non-buffer parameter whose name starts
    /// with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.kind != ParamKind::Buffer && p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Folds running batch-norm statistics into their buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_stat_updates(&mut self, updates: &[RunningStatUpdate], momentum: f64) {
        for u in updates {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let t = self.params[id.0].tensor.values_mut();
                for (r, &b) in t.iter_mut().zip(batch.iter()) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
    }

    /// FNV-1a over the raw bits of every parameter whose name starts with
    /// `prefix`, buffers included.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            for b in p.name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
            for v in p.tensor.values() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    /// Writes `params.bin` (concatenated tensor blobs) and `manifest.txt`
    /// (`<name> <shape> <byte offset>` per line) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut data = BufWriter::new(File::create(dir.join("params.bin"))?);
        let mut manifest = BufWriter::new(File::create(dir.join("manifest.txt"))?);
        let mut offset = 0usize;
        for p in &self.params {
            let mut buf = Vec::new();
            write_blob(&mut buf, &p.tensor)?;
            let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "{} {} {}", p.name, shape.join("x"), offset)?;
            data.write_all(&buf)?;
            offset += buf.len();
        }
        data.flush()?;
        manifest.flush()?;
        Ok(())
    }

    /// Loads values for every parameter named in the manifest. All of this
    /// store's parameters must be present with matching shapes.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        File::open(dir.join("params.bin"))?.read_to_end(&mut bytes)?;
        let manifest = BufReader::new(File::open(dir.join("manifest.txt"))?);
        let mut seen = vec![false; self.params.len()];
        for line in manifest.lines() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [name, _shape, offset] = fields[..] else {
                return Err(format_err(format!("bad manifest line `{line}`")));
            };
            let offset: usize = offset
                .parse()
                .map_err(|_| format_err(format!("bad offset in `{line}`")))?;
            let Some(id) = self.find(name) else {
                return Err(format_err(format!("checkpoint has unknown parameter `{name}`")));
            };
            if offset > bytes.len() {
                return Err(format_err(format!("offset {offset} past end of params.bin")));
            }
            let t = read_blob(&mut Cursor::new(&bytes[offset..]))?;
            let dst = &mut self.params[id.0].tensor;
            if t.shape() != dst.shape() {
                return Err(invalid(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.values_mut().copy_from_slice(t.values());
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "checkpoint is missing parameter `{}`",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Glorot/Xavier uniform initialization: `U(-l, l)` with
/// `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Result<DiffTensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    DiffTensor::new(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", ParamKind::Conv, DiffTensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        s.add("b.w", ParamKind::Dense, DiffTensor::new(&[3], vec![-1.0, 0.5, 0.25]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        s.save_checkpoint(dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.starts_with("a.w 2x2 0\n"));
        let mut t = store();
        t.tensor_mut(ParamId(0)).values_mut().fill(0.0);
        t.load_checkpoint(dir.path()).unwrap();
        assert_eq!(t.checksum(""), s.checksum(""));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.add("a.w", ParamKind::Conv, DiffTensor::scalar(0.0)).is_err());
    }

    #[test]
    fn checksum_tracks_prefix() {
        let mut s = store();
        let before_b = s.checksum("b.");
        s.tensor_mut(ParamId(0)).values_mut()[0] = 9.0;
        assert_eq!(s.checksum("b."), before_b);
        assert_ne!(s.checksum("a."), store().checksum("a."));
    }

    #[test]
    fn glorot_within_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = glorot_uniform(&[4, 6], 6, 4, &mut rng).unwrap();
        let limit = (6.0f64 / 10.0).sqrt();
        assert!(t.values().iter().all(|v| v.abs() < limit));
    }
}
