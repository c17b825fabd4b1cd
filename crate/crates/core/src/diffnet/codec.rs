//! `VNRF` parameter blobs: magic, format version, layer widths, then the
//! flat parameters as little-endian `f32`.

use std::io::{Read, Write};

use super::MlpParams;
use crate::error::{Error, Result};
use crate::Real;

pub const MLP_MAGIC: &[u8; 4] = b"VNRF";
pub const MLP_FORMAT_VERSION: u32 = 1;

pub fn write_mlp<T: Real, W: Write>(params: &MlpParams<T>, out: &mut W) -> Result<()> {
    out.write_all(MLP_MAGIC)?;
    out.write_all(&MLP_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(params.widths().len() as u32).to_le_bytes())?;
    for &w in params.widths() {
        out.write_all(&(w as u32).to_le_bytes())?;
    }
    for v in &params.data {
        let v = v.to_f32().unwrap_or(f32::NAN);
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<MlpParams<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MLP_MAGIC {
        return Err(Error::Format("missing VNRF magic".into()));
    }
    let version = read_u32(r)?;
    if version != MLP_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported parameter format version {version}")));
    }
    let n = read_u32(r)? as usize;
    if n > 64 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let mut widths = Vec::with_capacity(n);
    for _ in 0..n {
        widths.push(read_u32(r)? as usize);
    }
    let mut params = MlpParams::<f32>::zeros(&widths).map_err(|e| Error::Format(e.to_string()))?;
    params.data = read_f32s(r, params.len())?;
    Ok(params)
}
