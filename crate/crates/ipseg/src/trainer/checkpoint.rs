//! Binary checkpoint persistence.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "IPUN" | version u32 | meta_len u64 | meta JSON | epoch u64
//! | rng seed [u8;32] | rng word pos u128 | adam step u64
//! | blob count u64 | blobs... | crc32 u32
//! ```
//!
//! Each blob is `name_len u64 | name utf8 | rank u64 | dims u64... |
//! element count u64 | f32 data`. The trailing CRC32 covers every byte
//! before it, so a single flipped bit anywhere fails the load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HyperParams, Pipeline, Result, TrainerError};
use crate::netbuild::{NetConfig, Network};
use crate::util::crc32;

pub const MAGIC: &[u8; 4] = b"IPUN";
pub const FORMAT_VERSION: u32 = 1;

/// One named float32 tensor: a parameter, a batch-norm statistic, or an
/// optimizer moment.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Complete training state: enough to resume bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub net: NetConfig,
    pub hyper: HyperParams,
    pub pipeline: Pipeline,
    /// Completed epochs.
    pub epoch: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Adam step count (0 for SGD or an untrained net).
    pub adam_t: u64,
    pub blobs: Vec<NamedBlob>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    net: NetConfig,
    hyper: HyperParams,
    pipeline: Pipeline,
}

impl Checkpoint {
    /// Snapshot of an untrained network: epoch 0, fresh RNG at the
    /// hyperparameter seed, zero optimizer moments. Resuming from this is
    /// identical to training from scratch.
    pub fn from_network(net: &Network<f32>, hp: &HyperParams, pipeline: Pipeline) -> Self {
        use rand::SeedableRng;
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(hp.seed);
        let opt = super::OptState::fresh(net, &hp.optimizer);
        super::snapshot_checkpoint(net, hp, pipeline, 0, &rng, &opt)
    }

    pub fn blob(&self, name: &str) -> Option<&NamedBlob> {
        self.blobs.iter().find(|b| b.name == name)
    }
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        net: ckpt.net.clone(),
        hyper: ckpt.hyper.clone(),
        pipeline: ckpt.pipeline,
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| TrainerError::Corrupt(format!("meta encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_seed);
    out.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    out.extend_from_slice(&ckpt.adam_t.to_le_bytes());
    out.extend_from_slice(&(ckpt.blobs.len() as u64).to_le_bytes());
    for blob in &ckpt.blobs {
        out.extend_from_slice(&(blob.name.len() as u64).to_le_bytes());
        out.extend_from_slice(blob.name.as_bytes());
        out.extend_from_slice(&(blob.shape.len() as u64).to_le_bytes());
        for &d in &blob.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(blob.data.len() as u64).to_le_bytes());
        for &v in &blob.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Sequential reader with bounds-checked primitives; any overrun is a
/// corruption, not a panic.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| TrainerError::Corrupt("truncated checkpoint".into()))?;
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

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    /// A u64 length that must also be a sane in-memory size.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|n| *n <= self.buf.len())
            .ok_or_else(|| TrainerError::Corrupt(format!("implausible length {n}")))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TrainerError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(TrainerError::Corrupt("truncated checkpoint".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32(payload) != stored_crc {
        return Err(TrainerError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(TrainerError::VersionUnsupported(version));
    }
    let meta_len = r.len()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| TrainerError::Corrupt(format!("meta decode: {e}")))?;
    let epoch = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let rng_word_pos = r.u128()?;
    let adam_t = r.u64()?;
    let blob_count = r.len()?;
    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| TrainerError::Corrupt("blob name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| {
            TrainerError::Corrupt("blob length overflow".into())
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect::<Vec<f32>>();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TrainerError::Corrupt(format!(
                "blob '{name}': shape {shape:?} does not cover {} elements",
                data.len()
            )));
        }
        blobs.push(NamedBlob { name, shape, data });
    }
    if r.pos != payload.len() {
        return Err(TrainerError::Corrupt(format!(
            "{} trailing bytes after last blob",
            payload.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        version,
        net: meta.net,
        hyper: meta.hyper,
        pipeline: meta.pipeline,
        epoch,
        rng_seed,
        rng_word_pos,
        adam_t,
        blobs,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ckpt)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
