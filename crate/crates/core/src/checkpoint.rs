//! Binary checkpoint container.
//!
//! Layout: the magic bytes `SEMFCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header and a payload of
//! little-endian `f64` values. The header indexes every tensor by name, so
//! readers look tensors up by name and ignore ones they do not know.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"SEMFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    /// Full run configuration.
    pub config: serde_json::Value,
    /// Trainer state needed to resume.
    pub state: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus a JSON header.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub state: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_hash: String, config: serde_json::Value, state: serde_json::Value) -> Self {
        Self { config_hash, config, state, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds `param/<name>` for every parameter and, with an optimizer,
    /// `adam.m/<name>` and `adam.v/<name>`.
    pub fn push_model(&mut self, store: &ParamStore, adam: Option<&AdamWState>) {
        for (id, p) in store.iter() {
            self.push(format!("param/{}", p.name), p.tensor.clone());
            if let Some(a) = adam {
                self.push(format!("adam.m/{}", p.name), a.m[id.index()].clone());
                self.push(format!("adam.v/{}", p.name), a.v[id.index()].clone());
            }
        }
    }

    /// Overwrites every parameter of `store` (and the optimizer moments) from
    /// the checkpoint. Extra tensors are ignored; missing or misshapen ones
    /// are errors.
    pub fn restore_model(&self, store: &mut ParamStore, adam: Option<&mut AdamWState>) -> Result<()> {
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.clone())
        };
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.tensor.shape().to_vec())).collect();
        let mut params = Vec::with_capacity(ids.len());
        for (id, name, shape) in &ids {
            params.push((*id, lookup(&format!("param/{name}"), shape)?));
        }
        if let Some(a) = adam {
            let mut m = Vec::with_capacity(ids.len());
            let mut v = Vec::with_capacity(ids.len());
            for (_, name, shape) in &ids {
                m.push(lookup(&format!("adam.m/{name}"), shape)?);
                v.push(lookup(&format!("adam.v/{name}"), shape)?);
            }
            a.m = m;
            a.v = v;
        }
        for (id, t) in params {
            store.get_mut(id).tensor = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.numel() });
            offset += t.numel();
        }
        let header = Header {
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            state: self.state.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&(x as f64).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset * 8;
            let end = start + e.len * 8;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("payload truncated in {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Float)
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self { config_hash: header.config_hash, config: header.config, state: header.state, tensors })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).io_context(|| format!("creating {}", tmp.display()))?;
            f.write_all(&bytes).io_context(|| format!("writing {}", tmp.display()))?;
            f.sync_all().io_context(|| format!("syncing {}", tmp.display()))?;
        }
        fs::rename(&tmp, path).io_context(|| format!("renaming {}", tmp.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .io_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes)
    }

    /// Reads only the JSON header.
    pub fn load_header(path: &Path) -> Result<Header> {
        let mut f = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
        let mut pre = [0u8; 20];
        f.read_exact(&mut pre).io_context(|| format!("reading {}", path.display()))?;
        if &pre[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(pre[12..20].try_into().expect("8 bytes")) as usize;
        let mut json = vec![0u8; hlen];
        f.read_exact(&mut json).io_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_lookup_by_name() {
        let mut c = Checkpoint::new("abc".into(), serde_json::json!({"x": 1}), serde_json::json!({"step": 3}));
        c.push("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 1e-300 as Float]).unwrap());
        c.push("b", Tensor::scalar(7.0));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.get("a"), c.get("a"));
        assert_eq!(back.get("b").unwrap().item(), 7.0);
        assert!(back.get("c").is_none());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
        let mut c = Checkpoint::new("h".into(), serde_json::Value::Null, serde_json::Value::Null);
        c.push("a", Tensor::zeros(&[4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn missing_parameter_is_reported() {
        let mut store = ParamStore::new();
        store.zeros("w", &[2]).unwrap();
        let c = Checkpoint::new("h".into(), serde_json::Value::Null, serde_json::Value::Null);
        let err = c.restore_model(&mut store, None).unwrap_err();
        assert!(err.to_string().contains("param/w"));
    }
}
