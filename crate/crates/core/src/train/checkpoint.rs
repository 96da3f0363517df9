//! Checkpoint container (little-endian):
//!
//! ```text
//! magic        8 bytes "AWCCCKPT"
//! version      u32
//! dtype        u8 (0 = f32, 1 = f64)
//! config       u32 length + JSON run config
//! step         u64
//! parameters   named tensors
//! optimizer    u64 update count, named first moments, named second moments
//! queue        u32 capacity, u32 count, count × {source str, u64 step, u32 len, values}
//! rng          32-byte master seed
//! checksum     SHA-256 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Adam, NegativeQueue, QueueEntry, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::weights::{decode_named, encode_named, Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AWCCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn encode<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(T::DTYPE.tag());
    let config = serde_json::to_string(&state.config.snapshot()?).expect("config serializes");
    w.str(&config);
    w.u64(state.step);

    let params = state.model.params();
    encode_named(&mut w, params.iter());
    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    w.u64(state.optimizer.t);
    encode_named(&mut w, names.iter().copied().zip(&state.optimizer.m));
    encode_named(&mut w, names.iter().copied().zip(&state.optimizer.v));

    w.u32(state.queue.capacity() as u32);
    w.u32(state.queue.len() as u32);
    for e in state.queue.iter() {
        w.str(&e.source_id);
        w.u64(e.step);
        w.u32(e.vector.len() as u32);
        w.values(&e.vector);
    }
    w.bytes(&state.rng_seed);
    let digest = Sha256::digest(&w.buf);
    w.bytes(&digest);
    Ok(w.buf)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(state)?;
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Optimizer moments must list the model's parameters in order, shape for shape.
fn check_layout<T: Scalar>(model: &Model<T>, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let params = model.params();
    let same = entries.len() == params.len()
        && entries
            .iter()
            .zip(params.iter())
            .all(|((n, t), (m, p))| n == m && t.shape() == p.shape());
    if !same {
        return Err(Error::Corrupt("optimizer state does not match the parameter list".into()));
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. The version is checked
/// first, then the checksum; nothing is returned unless both pass.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        if bytes.len() < 12 && CHECKPOINT_MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
            return Err(Error::Checksum);
        }
        return Err(Error::Corrupt(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }

    let mut r = Reader::new(&body[12..]);
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        log::warn!("{}: converting {dtype:?} checkpoint to {:?}", path.display(), T::DTYPE);
    }
    let config: RunConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Corrupt(format!("config snapshot: {e}")))?;
    let step = r.u64()?;
    let params = decode_named::<T>(&mut r)?;
    let t = r.u64()?;
    let m = decode_named::<T>(&mut r)?;
    let v = decode_named::<T>(&mut r)?;

    let capacity = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(capacity));
    for _ in 0..count {
        let source_id = r.str()?;
        let estep = r.u64()?;
        let len = r.u32()? as usize;
        entries.push(QueueEntry {
            vector: r.values(dtype, len)?,
            source_id,
            step: estep,
        });
    }
    let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if !r.is_at_end() {
        return Err(Error::Corrupt("trailing bytes before checksum".into()));
    }
    if capacity == 0 || count > capacity {
        return Err(Error::Corrupt(format!("queue holds {count} entries with capacity {capacity}")));
    }

    let mut model = Model::new(config.model_config()?, 0)?;
    check_layout(&model, &params)?;
    check_layout(&model, &m)?;
    check_layout(&model, &v)?;
    model.params_mut().assign_named(params)?;
    let t_cfg = &config.train;
    let optimizer = Adam {
        lr: t_cfg.lr,
        beta1: t_cfg.beta1,
        beta2: t_cfg.beta2,
        eps: t_cfg.adam_eps,
        t,
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
    };
    Ok(TrainState {
        step,
        model,
        optimizer,
        queue: NegativeQueue::from_entries(capacity, entries),
        rng_seed,
        config,
    })
}
