//! MMT1 tensor serialization.
//!
//! Layout: magic bytes `MMT1`, u8 dtype code (0 = f32, 1 = f64), u8 rank,
//! rank little-endian u32 extents, then the raw little-endian data.
//! Round-trips are bit-exact for both dtypes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MMT1";

/// Ranks above this are rejected as malformed rather than allocated.
const MAX_RANK: usize = 8;
/// Element-count cap guarding against corrupt headers.
const MAX_NUMEL: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    /// Exact-dtype accessor; a stored f64 tensor is not silently narrowed.
    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            TensorData::F32(t) => Ok(t),
            TensorData::F64(_) => Err(Error::format("expected f32 tensor, file holds f64")),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            TensorData::F64(t) => Ok(t),
            TensorData::F32(_) => Err(Error::format("expected f64 tensor, file holds f32")),
        }
    }
}

pub fn write_tensor<W: Write, E: Scalar>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    let rank = t.shape().len();
    if rank > MAX_RANK {
        return Err(Error::format(format!("tensor rank {rank} exceeds maximum {MAX_RANK}")));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[E::DTYPE.code(), rank as u8])?;
    for &d in t.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::format(format!("extent {d} exceeds u32 range")))?;
        w.write_all(&d32.to_le_bytes())?;
    }
    match E::DTYPE {
        Dtype::F32 => {
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Dtype::F64 => {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_f64().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<TensorData> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::format(format!(
            "bad tensor magic {:?}, expected {:?}",
            &head[..4],
            MAGIC
        )));
    }
    let dtype = Dtype::from_code(head[4])?;
    let rank = head[5] as usize;
    if rank > MAX_RANK {
        return Err(Error::format(format!("tensor rank {rank} exceeds maximum {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut ext = [0u8; 4];
    let mut numel: u64 = 1;
    for _ in 0..rank {
        read_exact(r, &mut ext)?;
        let d = u32::from_le_bytes(ext) as u64;
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel > MAX_NUMEL {
        return Err(Error::format(format!("tensor size {numel} exceeds sanity cap")));
    }
    let n = numel as usize;
    match dtype {
        Dtype::F32 => {
            let mut buf = vec![0u8; n * 4];
            read_exact(r, &mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(TensorData::F32(Tensor::from_vec(shape, data)?))
        }
        Dtype::F64 => {
            let mut buf = vec![0u8; n * 8];
            read_exact(r, &mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Ok(TensorData::F64(Tensor::from_vec(shape, data)?))
        }
    }
}

/// read_exact with truncation reported as a format error, not a panic
/// and not a bare I/O error.
fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("truncated tensor data")
        } else {
            Error::Io(e)
        }
    })
}

pub fn write_tensor_file<E: Scalar>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorData> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}
