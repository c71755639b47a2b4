//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "BLNS"                       magic
//! u32                          format version
//! u64 + bytes                  config block (fixed field order, see `encode_config`)
//! u32                          number of parameter blocks
//! per block:  u16 + utf8 name, u8 ndim, ndim × u64 dims, u64 count, count × f64
//! [u8; 32]                     SHA-256 of everything above
//! ```
//!
//! Blocks appear in [`ModelState::named_params`] order.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::state::ModelState;
use super::{AuxSchedule, ModelConfig, StreamMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BLNS";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn encode_config(c: &ModelConfig) -> Vec<u8> {
    let mut b = Vec::new();
    for n in [c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.context_length] {
        b.extend((n as u64).to_le_bytes());
    }
    b.push(match c.stream_mode {
        StreamMode::Single => 0,
        StreamMode::Cascade => 1,
    });
    b.push(c.aux_loss as u8);
    b.extend(c.aux_lambda.to_le_bytes());
    b.push(match c.aux_schedule {
        AuxSchedule::Proportional => 0,
        AuxSchedule::Ramp => 1,
    });
    b.extend(c.seed.to_le_bytes());
    b
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(CHECKPOINT_MAGIC);
    b.extend(CHECKPOINT_VERSION.to_le_bytes());
    let cfg = encode_config(state.config());
    b.extend((cfg.len() as u64).to_le_bytes());
    b.extend(cfg);
    let params = state.named_params();
    b.extend((params.len() as u32).to_le_bytes());
    for (name, t) in params {
        b.extend((name.len() as u16).to_le_bytes());
        b.extend(name.as_bytes());
        b.push(t.shape().len() as u8);
        for &dim in t.shape() {
            b.extend((dim as u64).to_le_bytes());
        }
        b.extend((t.len() as u64).to_le_bytes());
        for x in t.data() {
            b.extend(x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend(digest);
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corruption {
            path: self.origin.into(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupt(format!("size {v} does not fit")))
    }
}

fn decode_config(r: &mut Reader) -> Result<ModelConfig> {
    let len = r.usize()?;
    let start = r.pos;
    let n_layers = r.usize()?;
    let n_heads = r.usize()?;
    let d_model = r.usize()?;
    let vocab_size = r.usize()?;
    let context_length = r.usize()?;
    let stream_mode = match r.u8()? {
        0 => StreamMode::Single,
        1 => StreamMode::Cascade,
        x => return Err(r.corrupt(format!("unknown stream mode tag {x}"))),
    };
    let aux_loss = match r.u8()? {
        0 => false,
        1 => true,
        x => return Err(r.corrupt(format!("bad aux flag {x}"))),
    };
    let aux_lambda = r.f64()?;
    let aux_schedule = match r.u8()? {
        0 => AuxSchedule::Proportional,
        1 => AuxSchedule::Ramp,
        x => return Err(r.corrupt(format!("unknown aux schedule tag {x}"))),
    };
    let seed = r.u64()?;
    if r.pos - start != len {
        return Err(r.corrupt("config block length mismatch"));
    }
    Ok(ModelConfig {
        n_layers,
        n_heads,
        d_model,
        vocab_size,
        context_length,
        stream_mode,
        aux_loss,
        aux_lambda,
        aux_schedule,
        seed,
    })
}

/// Parses a checkpoint. `origin` only labels errors.
pub fn from_bytes(buf: &[u8], origin: &str, expected: Option<&ModelConfig>) -> Result<ModelState> {
    let corrupt = |reason: &str| Error::Corruption {
        path: origin.into(),
        reason: reason.into(),
    };
    if buf.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    if &buf[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader {
        buf: body,
        pos: 4,
        origin,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let config = decode_config(&mut r)?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::Validation(format!(
                "checkpoint config {config:?} disagrees with requested {want:?}"
            )));
        }
    }
    let mut state = ModelState::init(&config)?;
    let names: Vec<(String, Vec<usize>)> = state
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(r.corrupt(format!("expected {} blocks, found {count}", names.len())));
    }
    for ((want_name, want_shape), slot) in names.into_iter().zip(state.params_mut()) {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| r.corrupt("block name is not utf-8"))?;
        if name != want_name {
            return Err(r.corrupt(format!("expected block '{want_name}', found '{name}'")));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if shape != want_shape {
            return Err(r.corrupt(format!("block '{name}' has shape {shape:?}, expected {want_shape:?}")));
        }
        let n = r.usize()?;
        if n != shape.iter().product::<usize>() {
            return Err(r.corrupt(format!("block '{name}' count {n} disagrees with its shape")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        *slot = Tensor::new(shape, data).map_err(|e| r.corrupt(format!("block '{name}': {e}")))?;
    }
    if r.pos != body.len() {
        return Err(r.corrupt("trailing bytes after last block"));
    }
    Ok(state)
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, &path.display().to_string(), expected)
}
