//! Named-array checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "STRATCKP"
//! version    u32      currently 1
//! kind       u32 len + UTF-8 tag ("tokenizer", "top", "bottom")
//! config     u32 len + UTF-8 config echo
//! count      u32      number of arrays
//! per array:
//!   name     u32 len + UTF-8
//!   rank     u32
//!   dims     rank × u64
//!   bytes    u64      payload length, must equal 4 · Π dims
//!   payload  f32 little-endian, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"STRATCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Tokenizer,
    Top,
    Bottom,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Tokenizer => "tokenizer",
            ModelKind::Top => "top",
            ModelKind::Bottom => "bottom",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        [ModelKind::Tokenizer, ModelKind::Top, ModelKind::Bottom].into_iter().find(|k| k.tag() == tag)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Model configuration echo (`key = value` lines).
    pub config: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(kind: ModelKind, config: String, store: &ParamStore) -> Self {
        let arrays = store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self { kind, config, arrays }
    }

    /// Copy every array into the same-named parameter of `store`.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::Load {
                field: "count",
                msg: format!("checkpoint holds {} arrays, model has {}", self.arrays.len(), store.len()),
            });
        }
        for (name, t) in &self.arrays {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Load { field: "name", msg: format!("unknown parameter `{name}`") })?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Load {
                    field: "dims",
                    msg: format!("`{name}` has shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, self.kind.tag());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.numel() * 4) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Load { field: "magic", msg: "not a checkpoint file".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Load { field: "version", msg: format!("unsupported version {version}") });
        }
        let tag = r.string("kind")?;
        let kind = ModelKind::from_tag(&tag)
            .ok_or_else(|| Error::Load { field: "kind", msg: format!("unknown model kind `{tag}`") })?;
        let config = r.string("config")?;
        let count = r.u32("count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("name")?;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Load { field: "rank", msg: format!("`{name}` has rank {rank}") });
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dims")? as usize);
            }
            let len = r.u64("payload length")? as usize;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)) != Some(len) {
                return Err(Error::Load {
                    field: "payload length",
                    msg: format!("`{name}` declares {len} bytes for dims {dims:?}"),
                });
            }
            let payload = r.take(len, "payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Load { field: "dims", msg: e.to_string() })?;
            arrays.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Load { field: "trailer", msg: format!("{} unexpected trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Self { kind, config, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load and require a specific model kind.
    pub fn load_kind(path: impl AsRef<Path>, kind: ModelKind) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.kind != kind {
            return Err(Error::Load {
                field: "kind",
                msg: format!("expected a `{}` checkpoint, found `{}`", kind.tag(), ckpt.kind.tag()),
            });
        }
        Ok(ckpt)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Load { field, msg: format!("truncated at byte {}", self.pos) });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &'static str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Load { field, msg: "invalid UTF-8".into() })
    }
}
