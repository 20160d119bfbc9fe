//! Self-describing parameter files.
//!
//! Layout, all integers little-endian: magic `PZCK`, `u16` version, then
//! length-prefixed (`u32`) UTF-8 strings for the component tag and the
//! config echo, a `u32` count of metadata key/value strings, and a `u32`
//! count of tensors, each stored as name, `u8` rank, `u32` dims and `f64`
//! values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PZCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    /// TOML text of the component configuration.
    pub config: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn from_params<P: ParamSet>(
        component: &str,
        config: String,
        metadata: BTreeMap<String, String>,
        params: &P,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        params.visit(&mut |name, a| tensors.push((name.to_string(), a.to_owned())));
        Checkpoint {
            component: component.to_string(),
            config,
            metadata,
            tensors,
        }
    }

    pub fn expect_component(&self, tag: &str) -> Result<()> {
        if self.component != tag {
            return Err(Error::ComponentTag {
                expected: tag.to_string(),
                found: self.component.clone(),
            });
        }
        Ok(())
    }

    /// Copies stored tensors into `params`, which must have the same layout.
    pub fn restore<P: ParamSet>(&self, params: &mut P) -> Result<()> {
        let layout = params.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::dim("checkpoint tensor count", layout.len(), self.tensors.len()));
        }
        for ((name, shape), (stored, a)) in layout.iter().zip(&self.tensors) {
            if name != stored {
                return Err(Error::dim("checkpoint tensor name", name, stored));
            }
            if shape.as_slice() != a.shape() {
                return Err(Error::dim(format!("tensor {name}"), format!("{shape:?}"), format!("{:?}", a.shape())));
            }
        }
        let mut it = self.tensors.iter();
        params.visit_mut(&mut |_, mut dst| {
            let (_, src) = it.next().expect("layout checked");
            dst.assign(src);
        });
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Dependency(format!("{} checkpoint lacks metadata `{key}`", self.component)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.component);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, a) in &self.tensors {
            put_str(&mut out, name);
            out.push(a.ndim() as u8);
            for d in a.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.err("magic", "not a checkpoint file"));
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(r.err("version", &format!("unsupported version {version}")));
        }
        let component = r.string("component")?;
        let config = r.string("config")?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32("metadata count")? {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8, &name)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let a = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length matches shape");
            tensors.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailer", "unexpected bytes after the last tensor"));
        }
        Ok(Checkpoint {
            component,
            config,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }

    /// Content hash of the encoded file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.encode());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, field: &str, reason: &str) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.err(field, "file truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)? as usize;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(field, "invalid UTF-8"))
    }
}
