//! TNS1 tensor encoding: the magic `TNS1`, the rank and each extent as
//! little-endian `u32`, then the elements as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anticipation_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNS1";

// Guards against allocating absurd buffers from a corrupt header.
const MAX_RANK: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("rank {0} exceeds {MAX_RANK}")]
    Rank(usize),
    #[error("extent product overflows")]
    Overflow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] anticipation_core::Error),
}

pub fn encode(w: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other("extent does not fit in u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode(r: &mut impl Read) -> Result<Tensor<f32>, DecodeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DecodeError::Magic(magic));
    }
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(DecodeError::Rank(rank));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or(DecodeError::Overflow)?;
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn write_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let f = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(f);
    encode(&mut w, t).and_then(|_| w.flush()).map_err(Error::io(path))
}

/// Reads a whole file holding exactly one tensor.
pub fn read_file(path: &Path) -> Result<Tensor<f32>> {
    let f = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(f);
    let t = decode(&mut r).map_err(|e| format_error(path, e))?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::Format {
            path: path.into(),
            reason: "trailing bytes after tensor".into(),
        }),
        Err(e) => Err(Error::io(path)(e)),
    }
}

pub(crate) fn format_error(path: &Path, e: DecodeError) -> Error {
    match e {
        DecodeError::Io(source) => Error::Io { path: path.into(), source },
        other => Error::Format {
            path: path.into(),
            reason: other.to_string(),
        },
    }
}
