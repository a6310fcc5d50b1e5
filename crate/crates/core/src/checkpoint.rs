//! Single-file checkpoints.
//!
//! Layout (little-endian): magic `SCTNCKPT`, `u32` version, `u64` config length
//! and the config as JSON, `u32` entry count, then per entry a manifest record
//! (`u16` name length, name, `u8` dtype, `u8` kind, `u8` rank, `u64` dims,
//! `u64` payload offset, `u64` payload length), then the raw payloads.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::float::{DType, Float};
use crate::model::SCTransNet;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SCTNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// A parsed checkpoint with payloads still in raw bytes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
    payload: Vec<u8>,
}

pub fn encode<T: Float>(config: &ModelConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for e in store.entries() {
        let start = payload.len() as u64;
        for &v in e.value.data() {
            v.to_le_bytes_into(&mut payload);
        }
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(match e.kind {
            ParamKind::Learnable => 0,
            ParamKind::Buffer => 1,
        });
        out.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&start.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64 - start).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint<T: Float>(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore<T>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(config, store))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let cfg_len = r.u64("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
            .map_err(|e| Error::Format(format!("config: {e}")))?;
        let count = r.u32("entry count")?;
        let mut manifest = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let n = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(n, "name")?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.u8("dtype")?)
                .ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype")))?;
            let kind = match r.u8("kind")? {
                0 => ParamKind::Learnable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Format(format!("`{name}`: unknown kind {k}"))),
            };
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64("offset")?;
            let len = r.u64("length")?;
            let numel: usize = shape.iter().product();
            if (numel * dtype.size()) as u64 != len {
                return Err(Error::Format(format!(
                    "`{name}`: payload length disagrees with shape {shape:?}"
                )));
            }
            manifest.push(ManifestEntry {
                name,
                dtype,
                kind,
                shape,
                offset,
                len,
            });
        }
        let payload = bytes[r.pos..].to_vec();
        for e in &manifest {
            if e.offset
                .checked_add(e.len)
                .is_none_or(|end| end > payload.len() as u64)
            {
                return Err(Error::Format(format!("truncated payload for `{}`", e.name)));
            }
        }
        Ok(Self {
            config,
            manifest,
            payload,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Loads every tensor into `store`; nothing is modified unless the name
    /// sets, shapes and dtypes all agree.
    pub fn load_into<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut values = Vec::with_capacity(self.manifest.len());
        for e in &self.manifest {
            if e.dtype != T::DTYPE {
                return Err(Error::Incompatible(format!(
                    "`{}` is stored as {:?}, requested {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let bytes = &self.payload[e.offset as usize..(e.offset + e.len) as usize];
            let data = bytes
                .chunks_exact(e.dtype.size())
                .map(T::from_le_slice)
                .collect();
            values.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
        }
        store.replace_values(values)
    }

    /// Rebuilds the model described by the stored config and loads its tensors.
    pub fn restore<T: Float>(&self) -> Result<(SCTransNet, ParamStore<T>)> {
        let (model, mut store) = SCTransNet::build(&self.config)?;
        self.load_into(&mut store)?;
        Ok((model, store))
    }
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(SCTransNet, ParamStore<T>)> {
    Checkpoint::read(path)?.restore()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new(4);
        s.learnable("a.weight", &[2, 3], Init::Uniform(1.0))
            .unwrap();
        s.buffer("a.running_var", &[3], Init::Ones).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let src = store();
        let bytes = encode(&ModelConfig::default(), &src);
        let ck = Checkpoint::decode(&bytes).unwrap();
        let mut dst = ParamStore::<f32>::new(99);
        dst.learnable("a.weight", &[2, 3], Init::Zeros).unwrap();
        dst.buffer("a.running_var", &[3], Init::Zeros).unwrap();
        ck.load_into(&mut dst).unwrap();
        for (a, b) in src.entries().iter().zip(dst.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncation_and_dtype_mismatch_are_errors() {
        let bytes = encode(&ModelConfig::default(), &store());
        for cut in [4, 20, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let ck = Checkpoint::decode(&bytes).unwrap();
        let mut wide = ParamStore::<f64>::new(0);
        wide.learnable("a.weight", &[2, 3], Init::Zeros).unwrap();
        wide.buffer("a.running_var", &[3], Init::Zeros).unwrap();
        assert!(matches!(
            ck.load_into(&mut wide),
            Err(Error::Incompatible(_))
        ));
        assert!(wide
            .entries()
            .iter()
            .all(|e| e.value.data().iter().all(|&v| v == 0.0)));
    }
}
