//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "FASD"
//! version u32      currently 1
//! prec    u8       element width in bytes: 4 or 8
//! params  u32 count, then per parameter:
//!         name  u16 length + UTF-8 bytes
//!         rank  u8
//!         dims  u32 each
//!         data  width * product(dims) bytes, little-endian IEEE-754
//! optims  u8 count, then per optimizer:
//!         kind u8, step u64, u32 param count, per parameter:
//!         name u16 + bytes, u8 slot count, per slot: u32 len + data
//! step    u64      global training step, so resumed logs keep numbering
//! rng     u32 length + opaque generator state bytes
//! config  u32 length + UTF-8 key=value text
//! ```
//!
//! Writes go to a sibling temp file first and land with an atomic rename,
//! so a crash never leaves a half-written checkpoint under the final name.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::Precision;
use crate::optim::OptimState;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"FASD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"FASD\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint stores {file}-byte elements but {requested}-byte were requested")]
    Precision { file: u8, requested: u8 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Everything a training run needs to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar> {
    pub params: Vec<(String, Vec<usize>, Vec<F>)>,
    pub optimizers: Vec<OptimState<F>>,
    pub step: u64,
    pub rng_state: Vec<u8>,
    pub config_text: String,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
}

fn put_elems<F: Scalar>(out: &mut Vec<u8>, xs: &[F]) {
    for x in xs {
        x.write_le(out);
    }
}

/// Serialize to bytes.
pub fn encode_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(F::WIDTH as u8);

    put_u32(&mut out, ckpt.params.len() as u32);
    for (name, shape, data) in &ckpt.params {
        put_name(&mut out, name);
        out.push(shape.len() as u8);
        for &d in shape {
            put_u32(&mut out, d as u32);
        }
        put_elems(&mut out, data);
    }

    out.push(ckpt.optimizers.len() as u8);
    for opt in &ckpt.optimizers {
        out.push(opt.kind);
        put_u64(&mut out, opt.step);
        put_u32(&mut out, opt.slots.len() as u32);
        for (name, slots) in &opt.slots {
            put_name(&mut out, name);
            out.push(slots.len() as u8);
            for slot in slots {
                put_u32(&mut out, slot.len() as u32);
                put_elems(&mut out, slot);
            }
        }
    }

    put_u64(&mut out, ckpt.step);
    put_u32(&mut out, ckpt.rng_state.len() as u32);
    out.extend_from_slice(&ckpt.rng_state);
    put_u32(&mut out, ckpt.config_text.len() as u32);
    out.extend_from_slice(ckpt.config_text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.pos });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))
    }

    fn elems<F: Scalar>(&mut self, n: usize) -> Result<Vec<F>, CheckpointError> {
        let bytes = self.take(n * F::WIDTH)?;
        Ok(bytes.chunks_exact(F::WIDTH).map(F::read_le).collect())
    }
}

fn check_header(r: &mut Reader) -> Result<u8, CheckpointError> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    r.u8()
}

/// Deserialize; the element width stored in the file must match `F`.
pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let width = check_header(&mut r)?;
    if width as usize != F::WIDTH {
        return Err(CheckpointError::Precision {
            file: width,
            requested: F::WIDTH as u8,
        });
    }

    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape.iter().product::<usize>();
        let data = r.elems::<F>(len)?;
        params.push((name, shape, data));
    }

    let n_opts = r.u8()? as usize;
    let mut optimizers = Vec::with_capacity(n_opts);
    for _ in 0..n_opts {
        let kind = r.u8()?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut slots = std::collections::BTreeMap::new();
        for _ in 0..n {
            let name = r.name()?;
            let n_slots = r.u8()? as usize;
            let mut per_param = Vec::with_capacity(n_slots);
            for _ in 0..n_slots {
                let len = r.u32()? as usize;
                per_param.push(r.elems::<F>(len)?);
            }
            if slots.insert(name.clone(), per_param).is_some() {
                return Err(CheckpointError::Corrupt(format!(
                    "duplicate optimizer slot entry {name:?}"
                )));
            }
        }
        optimizers.push(OptimState { kind, step, slots });
    }

    let step = r.u64()?;
    let rng_len = r.u32()? as usize;
    let rng_state = r.take(rng_len)?.to_vec();
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("config text is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after config block",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        optimizers,
        step,
        rng_state,
        config_text,
    })
}

/// Element width stored in a checkpoint file, without reading the body.
pub fn peek_precision(path: &Path) -> Result<Precision, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let width = check_header(&mut r)?;
    Precision::from_tag(width)
        .ok_or_else(|| CheckpointError::Corrupt(format!("element width {width} is not 4 or 8")))
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    ckpt: &Checkpoint<F>,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(ckpt);
    let io_err = |source: io::Error| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
