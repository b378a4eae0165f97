//! Checkpoint persistence.
//!
//! Layout (all integers little-endian):
//!   magic           5 bytes, "CMUN1"
//!   config_len      u64, then that many bytes of UTF-8 config text
//!   epoch           u64
//!   tensor_count    u64
//!   per tensor:     name_len u64, name bytes, dtype tag u8 (1=f32, 2=f64),
//!                   rank u64, dims (rank x u64), raw little-endian values
//!   checksum        u32, CRC-32 (IEEE) of every preceding byte
//!
//! A checkpoint holds the full run config, every model parameter and
//! buffer, a `meta.bn_ready` flag, and optionally Adam state under
//! `adam.t` / `adam.m.*` / `adam.v.*`. Loads verify the checksum before
//! parsing and validate every tensor before touching the model, so a bad
//! file can never leave a model half-updated.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::{Dtype, Scalar};

pub const MAGIC: &[u8; 5] = b"CMUN1";

/// CRC-32 (IEEE 802.3): reflected polynomial 0xEDB88320, init and final
/// xor 0xFFFFFFFF. Check value: crc32(b"123456789") == 0xCBF43926.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// One tensor record as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Raw little-endian values, `shape.product() * dtype.size()` bytes.
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decode the raw bytes as `T`, which must match the stored dtype.
    pub fn decode<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' is {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let size = self.dtype.size();
        Ok(self.bytes.chunks_exact(size).map(T::read_le).collect())
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub config: RunConfig,
    pub epoch: u64,
    pub tensors: Vec<StoredTensor>,
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &dim in shape {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for value in data {
        value.write_le(out);
    }
}

/// Serialize a checkpoint to bytes. Pass `adam` to persist optimizer state.
pub fn to_bytes<T: Scalar>(
    config: &RunConfig,
    epoch: u64,
    model: &Model<T>,
    adam: Option<&Adam<T>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let config_text = config.print();
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());

    let named = model.named_tensors();
    let mut count = named.len() as u64 + 1; // + meta.bn_ready
    if let Some(adam) = adam {
        count += 1 + 2 * adam.slots().count() as u64; // adam.t + m/v per param
    }
    out.extend_from_slice(&count.to_le_bytes());

    for entry in &named {
        push_tensor(&mut out, &entry.name, entry.tensor.shape(), &entry.tensor.data());
    }
    let ready = if model.bn_ready() { T::ONE } else { T::ZERO };
    push_tensor(&mut out, "meta.bn_ready", &[1], &[ready]);
    if let Some(adam) = adam {
        push_tensor(&mut out, "adam.t", &[1], &[T::from_f64(adam.t() as f64)]);
        for (name, m, v, shape) in adam.slots() {
            push_tensor(&mut out, &format!("adam.m.{name}"), shape, m);
            push_tensor(&mut out, &format!("adam.v.{name}"), shape, v);
        }
    }

    let checksum = crc32(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn save<T: Scalar>(
    path: &Path,
    config: &RunConfig,
    epoch: u64,
    model: &Model<T>,
    adam: Option<&Adam<T>>,
) -> Result<()> {
    std::fs::write(path, to_bytes(config, epoch, model, adam)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".to_string()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse checkpoint bytes. The checksum is verified before anything else.
pub fn from_bytes(bytes: &[u8]) -> Result<CheckpointFile> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".to_string()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }

    let mut cursor = Cursor { bytes: body, pos: 0 };
    if cursor.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".to_string()));
    }
    let config_len = cursor.u64()? as usize;
    let config_text = std::str::from_utf8(cursor.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".to_string()))?;
    let config = RunConfig::parse_str(config_text)?;
    let epoch = cursor.u64()?;
    let count = cursor.u64()? as usize;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cursor.u64()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?
            .to_string();
        let dtype = Dtype::from_tag(cursor.u8()?).ok_or_else(|| {
            Error::Checkpoint(format!("tensor '{name}' has an unknown dtype tag"))
        })?;
        let rank = cursor.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let byte_len = len.checked_mul(dtype.size()).ok_or_else(|| {
            Error::Checkpoint(format!("tensor '{name}' has an absurd shape"))
        })?;
        let bytes = cursor.take(byte_len)?.to_vec();
        tensors.push(StoredTensor { name, dtype, shape, bytes });
    }
    if cursor.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".to_string()));
    }
    Ok(CheckpointFile { config, epoch, tensors })
}

pub fn load(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

impl CheckpointFile {
    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensor("adam.t").is_some()
    }

    /// Copy every model tensor out of the checkpoint. All names, dtypes and
    /// shapes are validated up front; on any error the model is untouched.
    pub fn apply_to_model<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        let named = model.named_tensors();
        let mut decoded: Vec<(&crate::model::NamedTensor<T>, Vec<T>)> =
            Vec::with_capacity(named.len());
        for entry in &named {
            let stored = self.tensor(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing tensor '{}'", entry.name))
            })?;
            if stored.shape != entry.tensor.shape() {
                return Err(shape_err!(
                    "load_checkpoint",
                    "tensor '{}' has shape {:?} on disk but {:?} in the model",
                    entry.name,
                    stored.shape,
                    entry.tensor.shape()
                ));
            }
            decoded.push((entry, stored.decode::<T>()?));
        }
        let ready = self
            .tensor("meta.bn_ready")
            .ok_or_else(|| Error::Checkpoint("checkpoint is missing meta.bn_ready".to_string()))?
            .decode::<T>()?;
        for (entry, values) in decoded {
            entry.tensor.data_mut().copy_from_slice(&values);
        }
        model.set_bn_ready(ready[0].to_f64() != 0.0);
        Ok(())
    }

    /// Restore Adam moments and step count saved with `--with-optimizer`.
    pub fn apply_to_adam<T: Scalar>(&self, adam: &mut Adam<T>) -> Result<()> {
        let t = self
            .tensor("adam.t")
            .ok_or_else(|| {
                Error::Checkpoint("checkpoint has no optimizer state".to_string())
            })?
            .decode::<T>()?;
        let names: Vec<String> = adam.slots().map(|(name, ..)| name.to_string()).collect();
        let mut decoded = Vec::with_capacity(names.len());
        for name in &names {
            let fetch = |prefix: &str| -> Result<Vec<T>> {
                self.tensor(&format!("{prefix}.{name}"))
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("checkpoint is missing {prefix}.{name}"))
                    })?
                    .decode::<T>()
            };
            decoded.push((name.clone(), fetch("adam.m")?, fetch("adam.v")?));
        }
        for (name, m, v) in decoded {
            adam.load_slot(&name, &m, &v)?;
        }
        adam.set_t(t[0].to_f64() as u64);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::tensor::Tape;

    fn downsized() -> ModelConfig {
        ModelConfig::downsized()
    }

    fn primed_model(seed: u64) -> Model<f32> {
        let model = build_model::<f32>(&downsized(), seed).unwrap();
        let mut tape = Tape::new();
        let n = 32 * 32 * 3;
        let x: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = crate::tensor::Tensor::from_vec(x, &[1, 3, 32, 32]).unwrap();
        model.forward(&mut tape, &x, crate::tensor::Mode::Train).unwrap();
        model
    }

    #[test]
    fn crc32_matches_reference_vectors() {
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b"The quick brown fox jumps over the lazy dog"), 0x414F_A339);
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let model = primed_model(3);
        let config = RunConfig::default();
        let bytes = to_bytes(&config, 17, &model, None);
        let file = from_bytes(&bytes).unwrap();
        assert_eq!(file.epoch, 17);
        assert_eq!(file.config, config);
        assert!(!file.has_optimizer_state());

        // A model from a different seed converges to the stored one exactly.
        let restored = build_model::<f32>(&downsized(), 999).unwrap();
        file.apply_to_model(&restored).unwrap();
        assert!(restored.bn_ready());
        for (a, b) in model.named_tensors().iter().zip(restored.named_tensors()) {
            assert_eq!(a.name, b.name);
            let (da, db) = (a.tensor.data(), b.tensor.data());
            assert_eq!(da.len(), db.len());
            for (x, y) in da.iter().zip(db.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
        // Re-serializing the restored model reproduces the file bit for bit.
        assert_eq!(to_bytes(&config, 17, &restored, None), bytes);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let model = primed_model(5);
        let mut adam = Adam::new(model.parameters(), 1e-3);
        // Manufacture gradients and take a step so m/v are nonzero.
        for (i, (_, p)) in model.parameters().iter().enumerate() {
            let g: Vec<f32> = (0..p.len()).map(|j| ((i + j) as f32 * 0.11).cos()).collect();
            p.accumulate_grad(&g);
        }
        adam.step().unwrap();

        let config = RunConfig::default();
        let bytes = to_bytes(&config, 1, &model, Some(&adam));
        let file = from_bytes(&bytes).unwrap();
        assert!(file.has_optimizer_state());

        let restored_model = build_model::<f32>(&downsized(), 999).unwrap();
        file.apply_to_model(&restored_model).unwrap();
        let mut restored = Adam::new(restored_model.parameters(), 1e-3);
        file.apply_to_adam(&mut restored).unwrap();
        assert_eq!(restored.t(), adam.t());
        for ((na, ma, va, _), (nb, mb, vb, _)) in adam.slots().zip(restored.slots()) {
            assert_eq!(na, nb);
            for (x, y) in ma.iter().zip(mb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // A checkpoint without optimizer state refuses apply_to_adam.
        let plain = from_bytes(&to_bytes(&config, 1, &model, None)).unwrap();
        let err = plain.apply_to_adam(&mut restored).unwrap_err().to_string();
        assert!(err.contains("no optimizer state"), "{err}");
    }

    #[test]
    fn any_corrupted_byte_is_refused() {
        let model = primed_model(7);
        let bytes = to_bytes(&RunConfig::default(), 2, &model, None);
        // Flip one byte in several regions: magic, config, tensor data, checksum.
        for pos in [0, 12, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            let err = from_bytes(&bad).unwrap_err().to_string();
            assert!(err.contains("checksum mismatch"), "pos {pos}: {err}");
        }
        let err = from_bytes(&bytes[..bytes.len() - 9]).unwrap_err().to_string();
        assert!(err.contains("checksum") || err.contains("truncated"), "{err}");
        assert!(from_bytes(b"CMUN").is_err());
    }

    #[test]
    fn shape_mismatch_leaves_model_untouched() {
        let model = primed_model(11);
        let file = from_bytes(&to_bytes(&RunConfig::default(), 3, &model, None)).unwrap();

        let mut other = downsized();
        other.channels = [8, 16, 32, 64, 128]; // doubles every width
        let target = build_model::<f32>(&other, 42).unwrap();
        // head.bias is [1] in both models; snapshot it to prove no partial load.
        let before = target.tensor("head.bias").unwrap().data().to_vec();

        let err = file.apply_to_model(&target).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
        let after = target.tensor("head.bias").unwrap().data().to_vec();
        assert_eq!(before, after, "failed load must not write anything");
        assert!(!target.bn_ready());
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let model = primed_model(13);
        let file = from_bytes(&to_bytes(&RunConfig::default(), 0, &model, None)).unwrap();
        let target = build_model::<f64>(&downsized(), 0).unwrap();
        let err = file.apply_to_model(&target).unwrap_err().to_string();
        assert!(err.contains("F32") || err.contains("F64"), "{err}");
    }

    #[test]
    fn file_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = primed_model(17);
        save(&path, &RunConfig::default(), 5, &model, None).unwrap();
        let file = load(&path).unwrap();
        assert_eq!(file.epoch, 5);
        assert!(load(&dir.path().join("missing.ckpt")).is_err());
    }
}
