//! Binary checkpoints.
//!
//! Layout (little-endian): magic `DFRF`, `u32` version, `u8` scalar width
//! in bytes, `u32`-length TOML metadata, RNG state (32-byte seed, `u64`
//! stream, `u128` word position), `u32` tensor count followed by entries
//! (`u32` name length, name, `u32` rank, `u64` dims, data), then `u32`
//! counter count followed by (`u32` name length, name, `u64` value).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Profile, Real, Tensor};
use crate::model::{ModelConfig, ModelState, Stage};
use crate::nn::ParamStore;
use crate::training::{AdamState, Moments};

use super::DataError;

pub const MAGIC: &[u8; 4] = b"DFRF";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step/";

#[derive(Serialize, Deserialize)]
struct Meta {
    stage: Stage,
    iteration: u64,
    model: ModelConfig,
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DataError::io(path, e)
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_name(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Real>(state: &ModelState<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::PROFILE.bytes() as u8);
    let meta = Meta {
        stage: state.stage,
        iteration: state.iteration,
        model: state.config,
    };
    let meta = toml::to_string(&meta).expect("metadata serializes");
    put_name(&mut out, &meta);
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let moments = &state.optimizer.moments;
    put_u32(&mut out, (state.params.len() + 2 * moments.len()) as u32);
    for (name, t) in state.params.iter() {
        put_tensor(&mut out, &format!("{PARAM}{name}"), t);
    }
    for (name, m) in moments {
        put_tensor(&mut out, &format!("{ADAM_M}{name}"), &m.m);
        put_tensor(&mut out, &format!("{ADAM_V}{name}"), &m.v);
    }
    put_u32(&mut out, moments.len() as u32);
    for (name, m) in moments {
        put_name(&mut out, &format!("{ADAM_STEP}{name}"));
        out.extend_from_slice(&m.step.to_le_bytes());
    }
    out
}

pub fn save_checkpoint<T: Real>(state: &ModelState<T>, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &encode_checkpoint(state))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.at < n {
            return Err(DataError::CorruptTable(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self, what: &str) -> Result<String, DataError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| DataError::CorruptTable(format!("{what} is not UTF-8")))
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>), DataError> {
        let name = self.name("tensor name")?;
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(DataError::CorruptTable(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor shape")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DataError::CorruptTable(format!("`{name}` has an impossible shape")))?;
        let width = T::PROFILE.bytes();
        let len = count
            .checked_mul(width)
            .ok_or_else(|| DataError::CorruptTable(format!("`{name}` has an impossible shape")))?;
        let raw = self.take(len, &format!("data of `{name}`"))?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Ok((name, Tensor::new(&shape, data)))
    }
}

/// Scalar profile a checkpoint was written with.
pub fn checkpoint_profile(path: &Path) -> Result<Profile, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let mut r = header(&bytes)?;
    match r.take(1, "profile")?[0] {
        4 => Ok(Profile::F32),
        8 => Ok(Profile::F64),
        other => Err(DataError::CorruptTable(format!("unknown scalar width {other}"))),
    }
}

fn header(bytes: &[u8]) -> Result<Reader<'_>, DataError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut r = Reader { bytes, at: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    Ok(r)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ModelState<T>, DataError> {
    let mut r = header(bytes)?;
    let width = r.take(1, "profile")?[0] as usize;
    if width != T::PROFILE.bytes() {
        return Err(DataError::ProfileMismatch {
            found: format!("{}-byte", width),
            expected: T::PROFILE.to_string(),
        });
    }
    let meta = r.name("metadata")?;
    let meta: Meta = toml::from_str(&meta).map_err(|e| DataError::CorruptTable(format!("metadata: {e}")))?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut params = ParamStore::new();
    let mut m_table = BTreeMap::new();
    let mut v_table = BTreeMap::new();
    let count = r.u32("tensor count")?;
    for _ in 0..count {
        let (name, t) = r.tensor::<T>()?;
        if let Some(n) = name.strip_prefix(PARAM) {
            params.insert(n, t);
        } else if let Some(n) = name.strip_prefix(ADAM_M) {
            m_table.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            v_table.insert(n.to_string(), t);
        } else {
            return Err(DataError::CorruptTable(format!("unexpected entry `{name}`")));
        }
    }
    let mut moments = BTreeMap::new();
    let counters = r.u32("counter count")?;
    for _ in 0..counters {
        let name = r.name("counter name")?;
        let step = r.u64("counter value")?;
        let n = name
            .strip_prefix(ADAM_STEP)
            .ok_or_else(|| DataError::CorruptTable(format!("unexpected counter `{name}`")))?;
        let (Some(m), Some(v)) = (m_table.remove(n), v_table.remove(n)) else {
            return Err(DataError::CorruptTable(format!("incomplete optimizer moments for `{n}`")));
        };
        moments.insert(n.to_string(), Moments { m, v, step });
    }
    if !m_table.is_empty() || !v_table.is_empty() {
        return Err(DataError::CorruptTable("optimizer moments without step counts".into()));
    }
    if r.at != bytes.len() {
        return Err(DataError::CorruptTable(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(ModelState {
        config: meta.model,
        params,
        optimizer: AdamState { moments },
        rng,
        stage: meta.stage,
        iteration: meta.iteration,
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelState<T>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_checkpoint(&bytes)
}
