//! Named-tensor checkpoints (`.tdck`).
//!
//! Layout, little-endian:
//!
//! ```text
//! "TDCK"  u32 version  u32 meta_len  meta (UTF-8 "key=value\n" lines, sorted)
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 dtype (0 = f32, 1 = f16), u8 ndim,
//!             u32 dims[ndim], payload (product(dims) · dtype size bytes)
//! ```
//!
//! The content hash is SHA-256 over the serialized bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::f16::f16_to_f32;
use crate::params::ParamStore;
use crate::tensor::{Activation, Real, Tensor};
use crate::world_model::{Preset, WorldModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    /// Raw binary16 bit patterns.
    F16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f32.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|&h| f16_to_f32(h)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F32(data),
        }
    }

    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 1 + 1 + 4 * self.shape.len() + self.data.len() * self.data.dtype().size()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad metadata value {key}={raw:?}")))
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn metadata_text(&self) -> String {
        self.metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape("checkpoint tensor", &t.shape, &[t.data.len()]));
            }
            if t.name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor {:?} header too large", t.name)));
            }
        }
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
                return Err(Error::Format(format!("metadata entry {k:?} not representable")));
            }
        }
        Ok(())
    }

    /// Exact serialized size.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 + self.metadata_text().len() + 4 + self.tensors.iter().map(TensorRecord::encoded_len).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = self.metadata_text();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype().tag());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Truncated(format!("checkpoint {what} at offset {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: "TDCK",
                found: magic,
            });
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_of(take(4, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let meta_len = u32_of(take(4, "metadata length")?) as usize;
        let meta = std::str::from_utf8(take(meta_len, "metadata")?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line {line:?} lacks '='")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = u32_of(take(4, "tensor count")?) as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_tag(take(1, "dtype")?[0])?;
            let ndim = take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32_of(take(4, "dims")?) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} too large")))?;
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("tensor {name:?} too large")))?;
            let raw = take(nbytes, "payload")?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F16 => TensorData::F16(
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.push(TensorRecord { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let ck = Self { metadata, tensors };
        ck.validate()?;
        Ok(ck)
    }

    pub fn content_hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }

    pub fn content_hash_hex(&self) -> Result<String> {
        Ok(hex::encode(self.content_hash()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(format!("checkpoint {}", path.display())));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Serialized size of a checkpoint in bytes.
pub fn model_size_bytes(ck: &Checkpoint) -> usize {
    ck.encoded_len()
}

/// Every parameter of the model as an f32 tensor, plus architecture metadata
/// merged with `extra`.
pub fn model_to_checkpoint<F: Real>(model: &WorldModel<F>, extra: &BTreeMap<String, String>) -> Checkpoint {
    let mut metadata = extra.clone();
    let p = &model.preset;
    for (k, v) in [
        ("preset", p.name.clone()),
        ("latent_dim", p.latent_dim.to_string()),
        ("hidden_dim", p.hidden_dim.to_string()),
        ("hidden_layers", p.hidden_layers.to_string()),
        ("obs_dim", model.obs_dim.to_string()),
        ("act_dim", model.act_dim.to_string()),
        ("activation", model.activation.name().to_string()),
    ] {
        metadata.insert(k.to_string(), v);
    }
    let tensors = model
        .store
        .iter()
        .map(|(_, param)| {
            let t = param.value.to_f32();
            TensorRecord::f32(param.name.clone(), t.shape().to_vec(), t.into_data())
        })
        .collect();
    Checkpoint { metadata, tensors }
}

/// Rebuilds a model, widening f16 tensors to f32. Tensors beyond the model
/// heads (e.g. a latent projection) are kept in the store.
pub fn model_from_checkpoint<F: Real>(ck: &Checkpoint) -> Result<WorldModel<F>> {
    let preset = Preset::new(
        ck.meta("preset")?,
        ck.meta_parse("latent_dim")?,
        ck.meta_parse("hidden_dim")?,
        ck.meta_parse("hidden_layers")?,
    );
    let activation = Activation::parse(ck.meta("activation")?)?;
    let mut store = ParamStore::new();
    for t in &ck.tensors {
        let data: Vec<F> = t.data.to_f32().into_iter().map(|x| F::of(x as f64)).collect();
        store.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?, true);
    }
    WorldModel::from_store(
        preset,
        ck.meta_parse("obs_dim")?,
        ck.meta_parse("act_dim")?,
        activation,
        store,
    )
}

pub fn save_model<F: Real>(model: &WorldModel<F>, extra: &BTreeMap<String, String>, path: &Path) -> Result<Checkpoint> {
    let ck = model_to_checkpoint(model, extra);
    ck.save(path)?;
    Ok(ck)
}

pub fn load_model(path: &Path) -> Result<WorldModel<f32>> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::MODEL_OBS_DIM;
    use crate::rng::Rng;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.metadata.insert("seed".into(), "7".into());
        ck.tensors.push(TensorRecord::f32("a", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        ck.tensors.push(TensorRecord {
            name: "b".into(),
            shape: vec![2],
            data: TensorData::F16(vec![0x3c00, 0x0001]),
        });
        ck
    }

    #[test]
    fn round_trip_and_size() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes.len(), ck.encoded_len());
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(Checkpoint::new().encoded_len(), 16);
        assert_eq!(Checkpoint::new().to_bytes().unwrap().len(), 16);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut dup = sample();
        dup.tensors.push(TensorRecord::f32("a", vec![1], vec![0.0]));
        assert!(dup.to_bytes().is_err());
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = WorldModel::<f32>::new(
            Preset::student(),
            MODEL_OBS_DIM,
            1,
            Activation::Tanh,
            &mut Rng::seed_from_u64(3),
        );
        let ck = model_to_checkpoint(&m, &BTreeMap::new());
        let back: WorldModel<f32> = model_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.store.content_hash(), m.store.content_hash());
        assert_eq!(back.preset, m.preset);
        assert!(back.q_target.param_ids().all(|id| !back.store.is_trainable(id)));
        assert_eq!(
            model_to_checkpoint(&back, &BTreeMap::new()).content_hash().unwrap(),
            ck.content_hash().unwrap()
        );
    }
}
