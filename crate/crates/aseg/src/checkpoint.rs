//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ASEG" | u32 version = 1
//! u32 config_len | config text (key = value lines describing the model)
//! u32 n_tensors  | per tensor: u32 name_len, name bytes, u8 rank = 4,
//!                  4 x u64 extents, numel x f32 values
//! u8 has_adam    | if 1: f64 beta1, f64 beta2, f64 eps, u64 t,
//!                  u32 n_entries, per entry: u32 name_len, name bytes,
//!                  u64 len, len x f32 first moment, len x f32 second moment
//! u64 step counter
//! ```
//!
//! Values are stored as 32-bit floats regardless of the tensor mode, so a
//! 64-bit model round-trips through a checkpoint with f32 precision. Loading
//! validates the magic, version, and that every tensor name and shape
//! matches what the embedded config implies; nothing is returned on any
//! mismatch.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_config_from_text, model_config_to_text};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"ASEG";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: truncated or corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{path}: embedded config invalid: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: tensor set inconsistent with embedded config: {reason}")]
    ShapeMismatch { path: PathBuf, reason: String },
}

/// A loaded checkpoint: parameters, optional optimizer state, step counter.
pub struct Checkpoint<T: Scalar> {
    pub params: ModelParams<T>,
    pub adam: Option<AdamState<T>>,
    pub step: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn f32_slice<T: Scalar>(&mut self, values: &[T]) {
        for &v in values {
            self.buf
                .extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
        }
    }
}

/// Serializes parameters, optional Adam state and the step counter.
pub fn checkpoint_bytes<T: Scalar>(
    params: &ModelParams<T>,
    adam: Option<&AdamState<T>>,
    step: u64,
) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(VERSION);
    let config_text = model_config_to_text(&params.config);
    w.name(&config_text);

    let mut count = 0u32;
    params.visit(|_, _| count += 1);
    w.u32(count);
    params.visit(|name, t| {
        w.name(name);
        w.buf.push(4);
        for &e in &t.shape().0 {
            w.u64(e as u64);
        }
        w.f32_slice(t.data());
    });

    match adam {
        Some(state) => {
            w.buf.push(1);
            w.f64(state.beta1);
            w.f64(state.beta2);
            w.f64(state.eps);
            w.u64(state.t);
            w.u32(state.moments.len() as u32);
            for (name, (m, v)) in &state.moments {
                w.name(name);
                w.u64(m.len() as u64);
                w.f32_slice(m);
                w.f32_slice(v);
            }
        }
        None => w.buf.push(0),
    }
    w.u64(step);
    w.buf
}

pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    adam: Option<&AdamState<T>>,
    step: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(params, adam, step);
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, CheckpointError> {
        Err(CheckpointError::Corrupt {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return self.fail(format!("need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return self.fail("unreasonable string length");
        }
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).or_else(|_| self.fail("invalid UTF-8"))
    }

    fn f32_vec<T: Scalar>(&mut self, len: usize) -> Result<Vec<T>, CheckpointError> {
        let raw = self.take(len * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::from_f64c(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect())
    }
}

/// Parses and validates a checkpoint. The returned parameters are fully
/// populated or the load fails; no partial state escapes.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let config_text = r.name()?;
    let config: ModelConfig =
        model_config_from_text(&config_text).map_err(|reason| CheckpointError::Config {
            path: path.to_path_buf(),
            reason,
        })?;

    let n_tensors = r.u32()? as usize;
    let mut tensors: BTreeMap<String, (Vec<u64>, Vec<T>)> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.name()?;
        let rank = r.u8()?;
        if rank != 4 {
            return r.fail(format!("tensor {name}: rank {rank}, expected 4"));
        }
        let extents: Vec<u64> = (0..4).map(|_| r.u64()).collect::<Result<_, _>>()?;
        let numel = extents.iter().product::<u64>() as usize;
        if numel > 1 << 28 {
            return r.fail(format!("tensor {name}: unreasonable size"));
        }
        let data = r.f32_vec::<T>(numel)?;
        if tensors.insert(name.clone(), (extents, data)).is_some() {
            return r.fail(format!("duplicate tensor {name}"));
        }
    }

    let adam = if r.u8()? == 1 {
        let mut state = AdamState::<T>::new();
        state.beta1 = r.f64()?;
        state.beta2 = r.f64()?;
        state.eps = r.f64()?;
        state.t = r.u64()?;
        let n = r.u32()? as usize;
        for _ in 0..n {
            let name = r.name()?;
            let len = r.u64()? as usize;
            if len > 1 << 28 {
                return r.fail(format!("moment {name}: unreasonable size"));
            }
            let m = r.f32_vec::<T>(len)?;
            let v = r.f32_vec::<T>(len)?;
            state.moments.insert(name, (m, v));
        }
        Some(state)
    } else {
        None
    };
    let step = r.u64()?;
    if r.pos != bytes.len() {
        return r.fail("trailing bytes");
    }

    // Rebuild the parameter structure from the config, then demand that the
    // stored tensor set matches it exactly.
    let mut params = ModelParams::<T>::init(&config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| CheckpointError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut mismatch: Option<String> = None;
    let mut used = 0usize;
    params.visit_mut(|name, tensor| {
        if mismatch.is_some() {
            return;
        }
        match tensors.get(name) {
            None => mismatch = Some(format!("missing tensor {name}")),
            Some((extents, data)) => {
                let expect: Vec<u64> = tensor.shape().0.iter().map(|&e| e as u64).collect();
                if *extents != expect {
                    mismatch = Some(format!(
                        "tensor {name}: stored extents {extents:?}, config implies {expect:?}"
                    ));
                    return;
                }
                tensor.data_mut().copy_from_slice(data);
                used += 1;
            }
        }
    });
    if let Some(reason) = mismatch {
        return Err(CheckpointError::ShapeMismatch {
            path: path.to_path_buf(),
            reason,
        });
    }
    if used != tensors.len() {
        return Err(CheckpointError::ShapeMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "checkpoint has {} tensors, config implies {used}",
                tensors.len()
            ),
        });
    }
    Ok(Checkpoint {
        params,
        adam,
        step,
    })
}
