//! Binary checkpoints.
//!
//! Layout, little-endian: magic `GBDC`, `u32` version, `u32` tensor count;
//! per tensor a `u16` name length, the UTF-8 name, `u8` rank, `u32` dims and
//! the row-major `f32` values; finally a `u32` length and a JSON blob with
//! the run configuration.

use super::config::RunConfig;
use super::model::Model;
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GBDC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config_json: String,
}

/// The JSON blob stored after the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub config: RunConfig,
    pub num_classes: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Contract(format!("tensor name `{}` too long", t.name)))?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Contract("rank above 255".into()))?;
            let numel: u64 = t.dims.iter().map(|&d| u64::from(d)).product();
            if numel != t.data.len() as u64 {
                return Err(Error::Contract(format!("tensor `{}` dims do not match data", t.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(rank);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version} (expected {VERSION})"),
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at + 2,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8("rank")?;
            let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<u32>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
            let bytes_needed = numel.and_then(|n| n.checked_mul(4)).ok_or(Error::Format {
                offset: r.pos,
                msg: format!("tensor `{name}` is too large"),
            })?;
            let raw = r.take(bytes_needed, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let config_json = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "config is not UTF-8".into(),
            })?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { tensors, config_json })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        serde_json::from_str(&self.config_json).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("config blob: {e}"),
        })
    }
}

fn export(prefix: &str, store: &ParamStore, out: &mut Vec<NamedTensor>) {
    for (name, p) in store.iter() {
        for (suffix, t) in [("w", p.weights()), ("b", p.bias())] {
            let s = t.shape();
            let dims = if suffix == "b" {
                vec![t.len() as u32]
            } else {
                [s.n, s.c, s.h, s.w].iter().map(|&d| d as u32).collect()
            };
            out.push(NamedTensor {
                name: format!("{prefix}{name}.{suffix}"),
                dims,
                data: t.data().iter().map(|&v| v as f32).collect(),
            });
        }
    }
}

fn import(prefix: &str, store: &mut ParamStore, tensors: &[NamedTensor]) -> Result<()> {
    let incompatible = |msg: String| Error::Format { offset: 0, msg };
    for (name, p) in store.iter_mut() {
        let (w, b) = p.parts_mut();
        for (suffix, t) in [("w", w), ("b", b)] {
            let full = format!("{prefix}{name}.{suffix}");
            let src = tensors
                .iter()
                .find(|n| n.name == full)
                .ok_or_else(|| incompatible(format!("checkpoint lacks `{full}`")))?;
            if src.data.len() != t.len() {
                return Err(incompatible(format!(
                    "`{full}` has {} values, model expects {}",
                    src.data.len(),
                    t.len()
                )));
            }
            for (dst, v) in t.data_mut().iter_mut().zip(&src.data) {
                *dst = f64::from(*v);
            }
        }
    }
    Ok(())
}

const GBD_PREFIX: &str = "gbd.";

impl Model {
    /// Parameters at `f32` precision plus the configuration snapshot.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        export("", &self.trunk.store, &mut tensors);
        export(GBD_PREFIX, &self.gbd.store, &mut tensors);
        let snapshot = Snapshot {
            config: self.config.clone(),
            num_classes: self.num_classes,
        };
        Ok(Checkpoint {
            tensors,
            config_json: serde_json::to_string(&snapshot)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let snap = ckpt.snapshot()?;
        let mut m = Model::zeros(&snap.config, snap.num_classes)?;
        let expected = m.trunk.store.len() * 2 + m.gbd.store.len() * 2;
        if ckpt.tensors.len() != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{} tensors, model expects {expected}", ckpt.tensors.len()),
            });
        }
        import("", &mut m.trunk.store, &ckpt.tensors)?;
        import(GBD_PREFIX, &mut m.gbd.store, &ckpt.tensors)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
