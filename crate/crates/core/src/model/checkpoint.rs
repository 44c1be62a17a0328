//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "ACKP" u32 version
//! u32 len, UTF-8 key = value block (architecture and run metadata)
//! u64 step, u64 epoch
//! u32 count, then per tensor: u16 name_len, name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! The tensor list holds model parameters first, then any optimizer state
//! (names under `opt.`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelBundle, ModelConfig};

pub const MAGIC: &[u8; 4] = b"ACKP";
pub const VERSION: u32 = 1;
/// Tensors larger than this are rejected when decoding.
const MAX_ELEMS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: KvConfig,
    pub step: u64,
    pub epoch: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures every parameter of `bundle`; `meta` keys are merged over the
    /// architecture block.
    pub fn from_bundle(bundle: &ModelBundle, meta: &KvConfig, step: u64, epoch: u64) -> Self {
        let mut kv = bundle.config.to_kv();
        for k in meta.keys() {
            kv.set(k, meta.raw(k).unwrap_or_default());
        }
        Checkpoint {
            meta: kv,
            step,
            epoch,
            tensors: bundle
                .store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.meta)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    /// Rebuilds the bundle described by this checkpoint.
    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let mut bundle = ModelBundle::new(self.model_config()?)?;
        self.restore_params(&mut bundle)?;
        Ok(bundle)
    }

    /// Copies parameters into `bundle`, rejecting a different architecture.
    pub fn load_into(&self, bundle: &mut ModelBundle) -> Result<()> {
        let cfg = self.model_config()?;
        let (mut a, mut b) = (cfg.clone(), bundle.config.clone());
        // The init seed does not affect shapes.
        a.init_seed = 0;
        b.init_seed = 0;
        if a != b {
            return Err(Error::Format {
                kind: "checkpoint",
                path: PathBuf::new(),
                reason: "architecture does not match the model".into(),
            });
        }
        self.restore_params(bundle)
    }

    fn restore_params(&self, bundle: &mut ModelBundle) -> Result<()> {
        let ids: Vec<_> = bundle.store.ids().collect();
        for id in ids {
            let name = bundle.store.name(id).to_string();
            let t = self.tensor(&name).ok_or_else(|| Error::Format {
                kind: "checkpoint",
                path: PathBuf::new(),
                reason: format!("missing tensor `{name}`"),
            })?;
            let dst = bundle.store.get_mut(id);
            if t.shape() != dst.shape() {
                return Err(Error::Format {
                    kind: "checkpoint",
                    path: PathBuf::new(),
                    reason: format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), dst.shape()),
                });
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.render();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |reason: String| Error::Format {
            kind: "checkpoint",
            path: PathBuf::from(origin),
            reason,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|e| fail(e))? != MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = r.u32().map_err(|e| fail(e))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let meta_len = r.u32().map_err(|e| fail(e))? as usize;
        let meta_bytes = r.take(meta_len).map_err(|e| fail(e))?;
        let meta_text = std::str::from_utf8(meta_bytes).map_err(|_| fail("metadata is not UTF-8".into()))?;
        let meta = KvConfig::parse(meta_text, origin)?;
        let step = r.u64().map_err(|e| fail(e))?;
        let epoch = r.u64().map_err(|e| fail(e))?;
        let count = r.u32().map_err(|e| fail(e))? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16().map_err(|e| fail(e))? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(|e| fail(e))?)
                .map_err(|_| fail("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32().map_err(|e| fail(e))? as usize;
            let cols = r.u32().map_err(|e| fail(e))? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= MAX_ELEMS)
                .ok_or_else(|| fail(format!("tensor `{name}` is too large")))?;
            let raw = r.take(n * 8).map_err(|e| fail(e))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("tensor `{name}` has non-finite values")));
            }
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(fail(format!("duplicate tensor `{name}`")));
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes".into()));
        }
        Ok(Checkpoint {
            meta,
            step,
            epoch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
