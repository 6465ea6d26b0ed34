//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BCMB" | version u32
//! config_json_len u32 | config JSON
//! global_step u64 | phase_index u32 | step_in_phase u64 | adam_t u64 | data_seed u64
//! n_params u32 | tensor records...
//! n_opt u32   | tensor records (names "m.<param>" / "v.<param>")...
//! rng_blob_len u32 | seed [u8;32] | stream u64 | word_pos_lo u64 | word_pos_hi u64
//! ```
//!
//! A tensor record is `name_len u32 | name | rank u32 | extents u64×rank |
//! float32 payload`. Payloads are always f32 on disk; reloading into the f32
//! runtime is exact, which is what makes save→load→train bitwise equal to an
//! uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::ModelConfig;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::TrainError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BCMB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable ChaCha state: seed plus stream/position counters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
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

#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar> {
    pub config: ModelConfig,
    pub global_step: u64,
    /// 1-based phase number.
    pub phase_index: u32,
    pub step_in_phase: u64,
    pub adam_t: u64,
    pub data_seed: u64,
    pub params: BTreeMap<String, Tensor<S>>,
    pub opt_m: BTreeMap<String, Tensor<S>>,
    pub opt_v: BTreeMap<String, Tensor<S>>,
    pub rng: RngState,
}

/// Header fields readable without loading tensor payloads.
#[derive(Clone, Debug)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub global_step: u64,
    pub phase_index: u32,
    pub step_in_phase: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &e in t.shape() {
        put_u64(buf, e as u64);
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Checkpoint("file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<S: Scalar>(&mut self) -> Result<(String, Tensor<S>), TrainError> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|e| TrainError::Checkpoint(format!("bad tensor name: {e}")))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| TrainError::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| TrainError::Checkpoint(format!("config encode: {e}")))?;
        put_u32(&mut buf, config.len() as u32);
        buf.extend_from_slice(&config);
        put_u64(&mut buf, self.global_step);
        put_u32(&mut buf, self.phase_index);
        put_u64(&mut buf, self.step_in_phase);
        put_u64(&mut buf, self.adam_t);
        put_u64(&mut buf, self.data_seed);

        put_u32(&mut buf, self.params.len() as u32);
        for (name, t) in &self.params {
            put_tensor(&mut buf, name, t);
        }
        put_u32(&mut buf, (self.opt_m.len() + self.opt_v.len()) as u32);
        for (name, t) in &self.opt_m {
            put_tensor(&mut buf, &format!("m.{name}"), t);
        }
        for (name, t) in &self.opt_v {
            put_tensor(&mut buf, &format!("v.{name}"), t);
        }

        // RNG blob: seed, stream, word position (lo/hi).
        put_u32(&mut buf, 32 + 8 + 16);
        buf.extend_from_slice(&self.rng.seed);
        put_u64(&mut buf, self.rng.stream);
        put_u64(&mut buf, self.rng.word_pos as u64);
        put_u64(&mut buf, (self.rng.word_pos >> 64) as u64);
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf, pos: 0 };
        let (config, global_step, phase_index, step_in_phase, adam_t, data_seed) =
            read_header(&mut r)?;

        let n_params = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let (name, t) = r.tensor()?;
            params.insert(name, t);
        }
        let n_opt = r.u32()? as usize;
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for _ in 0..n_opt {
            let (name, t) = r.tensor()?;
            if let Some(rest) = name.strip_prefix("m.") {
                opt_m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("v.") {
                opt_v.insert(rest.to_string(), t);
            } else {
                return Err(TrainError::Checkpoint(format!(
                    "optimizer tensor {name:?} lacks m./v. prefix"
                )));
            }
        }
        let blob_len = r.u32()? as usize;
        if blob_len != 56 {
            return Err(TrainError::Checkpoint(format!(
                "unexpected rng blob length {blob_len}"
            )));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        Ok(Self {
            config,
            global_step,
            phase_index,
            step_in_phase,
            adam_t,
            data_seed,
            params,
            opt_m,
            opt_v,
            rng: RngState {
                seed,
                stream,
                word_pos: lo | (hi << 64),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Errors unless the checkpoint was produced under `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<(), TrainError> {
        if &self.config != expected {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint built for {:?}",
                self.config
            )));
        }
        Ok(())
    }
}

fn read_header(
    r: &mut Reader<'_>,
) -> Result<(ModelConfig, u64, u32, u64, u64, u64), TrainError> {
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| TrainError::Checkpoint(format!("config decode: {e}")))?;
    let global_step = r.u64()?;
    let phase_index = r.u32()?;
    let step_in_phase = r.u64()?;
    let adam_t = r.u64()?;
    let data_seed = r.u64()?;
    Ok((
        config,
        global_step,
        phase_index,
        step_in_phase,
        adam_t,
        data_seed,
    ))
}

/// Reads only the checkpoint header (config and progress counters).
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointHeader, TrainError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let (config, global_step, phase_index, step_in_phase, _, _) = read_header(&mut r)?;
    Ok(CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config,
        global_step,
        phase_index,
        step_in_phase,
    })
}
