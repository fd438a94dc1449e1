//! `TNSR` binary tensor files.
//!
//! ```text
//! offset 0  magic "TNSR"
//!        4  version u8 = 1
//!        5  dtype u8 (1 = f32, 2 = f64)
//!        6  rank u8
//!        7  reserved u8 = 0
//!        8  rank × u64 LE dims
//!        …  row-major LE payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;
const HEADER: usize = 8;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let size = t.dtype().size_of();
    let mut out = Vec::with_capacity(HEADER + 8 * t.rank() + size * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype_code(t.dtype()), t.rank() as u8, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER {
        return Err(format_err(bytes.len(), format!("header needs {HEADER} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(format_err(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        1 => DType::F32,
        2 => DType::F64,
        other => return Err(format_err(5, format!("unknown dtype {other}"))),
    };
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(format_err(6, "rank must be at least 1"));
    }
    if bytes[7] != 0 {
        return Err(format_err(7, format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let dims_end = HEADER + 8 * rank;
    if bytes.len() < dims_end {
        return Err(format_err(
            bytes.len(),
            format!("dims need {dims_end} bytes, file has {}", bytes.len()),
        ));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let at = HEADER + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let d = usize::try_from(d).ok().filter(|&d| d > 0).ok_or_else(|| format_err(at, format!("invalid extent {d}")))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| format_err(at, "element count overflows"))?;
        dims.push(d);
    }
    let size = dtype.size_of();
    let expected = numel
        .checked_mul(size)
        .ok_or_else(|| format_err(dims_end, "payload size overflows"))?;
    let actual = bytes.len() - dims_end;
    if actual != expected {
        return Err(format_err(
            dims_end,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let payload = &bytes[dims_end..];
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Tensor::new(&dims, data)?.to_dtype(dtype))
}

pub fn tensor_write(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn tensor_read(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
