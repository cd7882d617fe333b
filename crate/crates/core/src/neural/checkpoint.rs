//! Checkpoint file: `ALBF0001`, a little-endian table of named tensors, and a
//! trailing 64-bit checksum over everything before it.
//!
//! ```text
//! magic[8] | count u32 | { name_len u32 | name | dtype u8 | rank u32 | dims u64* | data }* | checksum u64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::layers::Layer;
use super::tensor::{DType, Real};
use super::train::{Adam, Model, TrainConfig};
use super::unet::UNetConfig;
use crate::checksum::{checksum64, checksum64_hex};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ALBF0001";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    pub dims: Vec<u64>,
    /// Raw little-endian payload.
    pub data: Vec<u8>,
}

impl Entry {
    fn from_reals<T: Real>(values: &[T], dims: Vec<u64>) -> Self {
        let mut data = Vec::with_capacity(values.len() * T::DTYPE.size());
        for &v in values {
            v.write_le(&mut data);
        }
        Entry { dtype: T::DTYPE, dims, data }
    }

    fn from_u64(values: &[u64]) -> Self {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Entry { dtype: DType::U64, dims: vec![values.len() as u64], data }
    }

    fn from_bytes(bytes: &[u8]) -> Self {
        Entry { dtype: DType::U8, dims: vec![bytes.len() as u64], data: bytes.to_vec() }
    }

    fn to_reals<T: Real>(&self, name: &str) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!("{name}: stored as {:?}, expected {:?}", self.dtype, T::DTYPE)));
        }
        Ok(self.data.chunks_exact(T::DTYPE.size()).map(T::read_le).collect())
    }

    fn to_u64(&self, name: &str) -> Result<Vec<u64>> {
        if self.dtype != DType::U64 {
            return Err(Error::Format(format!("{name}: expected u64 entry")));
        }
        Ok(self.data.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn to_f64(&self, name: &str) -> Result<Vec<f64>> {
        self.to_reals::<f64>(name)
    }
}

/// Ordered table of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorTable {
    pub entries: BTreeMap<String, Entry>,
}

impl TensorTable {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype as u8);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&e.data);
        }
        let sum = checksum64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum64(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.take(1)?[0])?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64()?);
            }
            let len = dims
                .iter()
                .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
            let data = r.take(usize::try_from(len).map_err(|_| Error::Format("entry too large".into()))?)?.to_vec();
            entries.insert(name, Entry { dtype, dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the tensor table".into()));
        }
        Ok(TensorTable { entries })
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks entry {name}")))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl<T: Real> Model<T> {
    pub fn to_table(&mut self) -> TensorTable {
        let mut entries = BTreeMap::new();
        let mut slot = 0;
        let (ms, vs) = (&self.adam.m, &self.adam.v);
        self.net.visit_params(&mut |p| {
            let dims: Vec<u64> = p.shape.iter().map(|&d| d as u64).collect();
            entries.insert(format!("param/{}", p.name), Entry::from_reals(&p.value, dims.clone()));
            entries.insert(format!("adam.m/{}", p.name), Entry::from_reals(&ms[slot], dims.clone()));
            entries.insert(format!("adam.v/{}", p.name), Entry::from_reals(&vs[slot], dims));
            slot += 1;
        });
        self.net.visit_buffers(&mut |b| {
            entries.insert(format!("buffer/{}", b.name), Entry::from_reals(&b.value, vec![b.value.len() as u64]));
        });
        let config = self.net.config;
        entries.insert("meta/format_version".into(), Entry::from_u64(&[FORMAT_VERSION]));
        entries.insert("meta/step".into(), Entry::from_u64(&[self.adam.step]));
        entries.insert("meta/config_digest".into(), Entry::from_bytes(config.digest().as_bytes()));
        entries.insert(
            "meta/unet_config".into(),
            Entry::from_bytes(serde_json::to_string(&config).expect("config serializes").as_bytes()),
        );
        entries.insert(
            "meta/train_config".into(),
            Entry::from_bytes(serde_json::to_string(&self.train).expect("config serializes").as_bytes()),
        );
        let a = &self.adam;
        entries.insert(
            "meta/adam".into(),
            Entry::from_reals(&[a.learning_rate, a.beta1, a.beta2, a.eps], vec![4]),
        );
        TensorTable { entries }
    }

    /// Serialized checkpoint bytes.
    pub fn to_bytes(&mut self) -> Vec<u8> {
        self.to_table().encode()
    }

    /// Hex checksum identifying the current state.
    pub fn checkpoint_id(&mut self) -> String {
        let bytes = self.to_bytes();
        checksum64_hex(&bytes[..bytes.len() - 8])
    }

    pub fn save(&mut self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(checksum64_hex(&bytes[..bytes.len() - 8]))
    }

    /// Restores a model; `expected` must match the stored configuration digest.
    pub fn from_bytes(bytes: &[u8], expected: &UNetConfig) -> Result<Self> {
        let table = TensorTable::decode(bytes)?;
        let version = table.get("meta/format_version")?.to_u64("meta/format_version")?;
        if version != [FORMAT_VERSION] {
            return Err(Error::Format(format!("unsupported checkpoint version {version:?}")));
        }
        let digest = table.get("meta/config_digest")?;
        if digest.data != expected.digest().as_bytes() {
            return Err(Error::Config("checkpoint was written for a different network configuration".into()));
        }
        let train: TrainConfig = serde_json::from_slice(&table.get("meta/train_config")?.data)
            .map_err(|e| Error::Format(format!("train config: {e}")))?;
        let mut model = Model::<T>::new(*expected, train)?;
        let adam_meta = table.get("meta/adam")?.to_f64("meta/adam")?;
        if adam_meta.len() != 4 {
            return Err(Error::Format("meta/adam must hold 4 values".into()));
        }
        let step = table.get("meta/step")?.to_u64("meta/step")?;
        let step = *step.first().ok_or_else(|| Error::Format("empty step entry".into()))?;

        let mut failure: Option<Error> = None;
        let mut m = Vec::new();
        let mut v = Vec::new();
        model.net.visit_params(&mut |p| {
            if failure.is_some() {
                return;
            }
            let load = |prefix: &str| -> Result<Vec<T>> {
                let name = format!("{prefix}/{}", p.name);
                let values = table.get(&name)?.to_reals::<T>(&name)?;
                if values.len() != p.value.len() {
                    return Err(Error::shape(format!("{name}: {} values, expected {}", values.len(), p.value.len())));
                }
                Ok(values)
            };
            match (load("param"), load("adam.m"), load("adam.v")) {
                (Ok(value), Ok(mm), Ok(vv)) => {
                    p.value = value;
                    m.push(mm);
                    v.push(vv);
                }
                (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => failure = Some(e),
            }
        });
        model.net.visit_buffers(&mut |b| {
            if failure.is_some() {
                return;
            }
            let name = format!("buffer/{}", b.name);
            match table.get(&name).and_then(|e| e.to_reals::<T>(&name)) {
                Ok(values) if values.len() == b.value.len() => b.value = values,
                Ok(_) => failure = Some(Error::shape(format!("{name}: wrong length"))),
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        model.adam = Adam {
            learning_rate: adam_meta[0],
            beta1: adam_meta[1],
            beta2: adam_meta[2],
            eps: adam_meta[3],
            step,
            m,
            v,
        };
        Ok(model)
    }

    pub fn load(path: &Path, expected: &UNetConfig) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }

    /// Restores a model using the network configuration recorded in the checkpoint.
    pub fn load_stored(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &stored_unet_config(&bytes)?)
    }
}

/// Network configuration recorded in checkpoint bytes.
pub fn stored_unet_config(bytes: &[u8]) -> Result<UNetConfig> {
    let table = TensorTable::decode(bytes)?;
    serde_json::from_slice(&table.get("meta/unet_config")?.data).map_err(|e| Error::Format(format!("unet config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig { in_channels: 2, stem_channels: 2, out_channels: 2, seed: 3 }
    }

    #[test]
    fn table_round_trip() {
        let mut model = Model::<f64>::new(tiny(), TrainConfig::default()).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let table = TensorTable::decode(&bytes).unwrap();
        assert_eq!(table.encode(), bytes);
    }

    #[test]
    fn wrong_config_is_rejected() {
        let mut model = Model::<f64>::new(tiny(), TrainConfig::default()).unwrap();
        let bytes = model.to_bytes();
        let other = UNetConfig { seed: 4, ..tiny() };
        assert!(matches!(Model::<f64>::from_bytes(&bytes, &other), Err(Error::Config(_))));
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let mut model = Model::<f64>::new(tiny(), TrainConfig::default()).unwrap();
        let bytes = model.to_bytes();
        assert!(matches!(Model::<f32>::from_bytes(&bytes, &tiny()), Err(Error::Format(_))));
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let mut model = Model::<f64>::new(tiny(), TrainConfig::default()).unwrap();
        let bytes = model.to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(Model::<f64>::from_bytes(&flipped, &tiny()), Err(Error::Integrity(_))));
        assert!(matches!(Model::<f64>::from_bytes(&bytes[..bytes.len() - 3], &tiny()), Err(Error::Integrity(_))));
        assert!(Model::<f64>::from_bytes(&bytes[..5], &tiny()).is_err());
    }
}
