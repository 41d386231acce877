//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "LATRCKPT"
//! version   u32
//! config    u32 length + UTF-8 `key = value` text (canonical order)
//! step      u64
//! epoch     u64
//! rng       32-byte seed, u64 stream, u128 word position
//! params    u32 count, then per entry:
//!             u16 name length, name, u8 group (0 backbone, 1 head),
//!             u8 rank, u32 dims, f64 values
//! buffers   u32 count, entries as above without the group byte
//! ```
//!
//! Parameters appear in model registration order. Files are written to a
//! temporary sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{ParamGroup, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LATRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub rng: RngState,
    pub step: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_store(self.config.model.clone(), self.store.clone())
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, group: Option<ParamGroup>, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    if let Some(g) = group {
        out.push(match g {
            ParamGroup::Backbone => 0,
            ParamGroup::Head => 1,
        });
    }
    out.push(t.shape().len() as u8);
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = c.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&c.step.to_le_bytes());
    out.extend_from_slice(&c.epoch.to_le_bytes());
    out.extend_from_slice(&c.rng.seed);
    out.extend_from_slice(&c.rng.stream.to_le_bytes());
    out.extend_from_slice(&c.rng.word_pos.to_le_bytes());
    out.extend_from_slice(&(c.store.params().len() as u32).to_le_bytes());
    for p in c.store.params() {
        put_tensor(&mut out, &p.name, Some(p.group), &p.value);
    }
    out.extend_from_slice(&(c.store.buffers().len() as u32).to_le_bytes());
    for b in c.store.buffers() {
        put_tensor(&mut out, &b.name, None, &b.value);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Data("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint holds invalid UTF-8".into()))
    }

    fn tensor(&mut self, with_group: bool) -> Result<(String, Option<ParamGroup>, Tensor)> {
        let len = self.u16()? as usize;
        let name = self.string(len)?;
        let group = if with_group {
            Some(match self.u8()? {
                0 => ParamGroup::Backbone,
                1 => ParamGroup::Head,
                g => return Err(Error::Data(format!("unknown parameter group {g}"))),
            })
        } else {
            None
        };
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, group, Tensor::from_vec(&shape, data)?))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    let config = RunConfig::parse(&text).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let step = r.u64()?;
    let epoch = r.u64()?;
    let rng = RngState {
        seed: r.array()?,
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.array()?),
    };
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let (name, group, t) = r.tensor(true)?;
        store.add_param(name, group.expect("read with group"), t);
    }
    for _ in 0..r.u32()? {
        let (name, _, t) = r.tensor(false)?;
        store.add_buffer(name, t);
    }
    if r.at != buf.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        config,
        store,
        rng,
        step,
        epoch,
    })
}

/// Write atomically: temporary sibling, flush, rename.
pub fn save(path: &Path, c: &Checkpoint) -> Result<()> {
    let bytes = encode(c);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode(&bytes)
}

/// A fresh checkpoint of an untrained model.
pub fn initial(config: &RunConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let model = Model::new(config.model.clone(), &mut rng)?;
    Ok(Checkpoint {
        config: config.clone(),
        store: model.store().clone(),
        rng: RngState::of(&rng),
        step: 0,
        epoch: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_is_bit_exact() {
        let mut cfg = RunConfig::toy();
        cfg.train.lr_start = 1.0 / 3.0;
        let mut c = initial(&cfg).unwrap();
        c.store.params_mut()[0].value.data_mut()[0] = -0.0;
        c.store.params_mut()[1].value.data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        c.step = 42;
        let bytes = encode(&c);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.config, c.config);
        assert_eq!(back.rng.restore().get_word_pos(), c.rng.word_pos);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"nope"), Err(Error::Data(_))));
        let mut bytes = encode(&initial(&RunConfig::toy()).unwrap());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = initial(&RunConfig::toy()).unwrap();
        save(&p, &c).unwrap();
        assert_eq!(load(&p).unwrap(), c);
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }
}
