//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `MIGSCKPT`, `u32` version, 32-byte config
//! hash, `u64` completed outer iterations, two RNG states (32-byte seed,
//! `u64` stream, `u128` word position), `u32` tensor count, then per tensor:
//! `u32` name length, name bytes, `u8` kind, `u32` rank, `u64` dims, `f32`
//! values.

use std::io::{Read, Write};
use std::path::Path;

use migs_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MigsError, Result};
use crate::meta::TrainRngs;
use crate::state::{ModelState, ParamKind};

pub const MAGIC: &[u8; 8] = b"MIGSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub outer_iteration: u64,
    pub rngs: TrainRngs,
    pub state: ModelState,
}

fn put_rng(out: &mut Vec<u8>, rng: &ChaCha8Rng) {
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.state.num_values() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.outer_iteration.to_le_bytes());
        put_rng(&mut out, &self.rngs.tasks);
        put_rng(&mut out, &self.rngs.batches);
        out.extend_from_slice(&(self.state.len() as u32).to_le_bytes());
        for (name, entry) in self.state.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match entry.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            let shape = entry.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in entry.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(MigsError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let outer_iteration = r.u64()?;
        let tasks = r.rng()?;
        let batches = r.rng()?;
        let count = r.u32()? as usize;
        let mut state = ModelState::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(r.err(&format!("unknown tensor kind {k}"))),
            };
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if state.get(&name).is_some() {
                return Err(r.err(&format!("duplicate tensor {name}")));
            }
            state.insert(name, Tensor::new(&shape, data), kind);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            outer_iteration,
            rngs: TrainRngs { tasks, batches },
            state,
        })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| MigsError::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| MigsError::io(&tmp, e))?;
        f.sync_all().map_err(|e| MigsError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| MigsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| MigsError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: &str) -> MigsError {
        MigsError::Format {
            path: self.path.to_path_buf(),
            message: format!("{message} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.take(32)?.try_into().expect("32 bytes");
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}
