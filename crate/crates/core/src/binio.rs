//! Little-endian binary helpers shared by the checkpoint and dataset cache formats.

use std::io::{self, Read, Write};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Length-prefixed (u64) array of f64.
pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    write_u64(w, values.len() as u64)?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Length-prefixed (u64) array of u32.
pub(crate) fn write_u32s<W: Write>(w: &mut W, values: &[u32]) -> io::Result<()> {
    write_u64(w, values.len() as u64)?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_u64s<W: Write>(w: &mut W, values: &[u64]) -> io::Result<()> {
    write_u64(w, values.len() as u64)?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_len<R: Read>(r: &mut R, limit: usize) -> io::Result<usize> {
    let n = read_u64(r)? as usize;
    if n > limit {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("array length {n} exceeds limit {limit}"),
        ));
    }
    Ok(n)
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, limit: usize) -> io::Result<Vec<f64>> {
    let n = read_len(r, limit)?;
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub(crate) fn read_u32s<R: Read>(r: &mut R, limit: usize) -> io::Result<Vec<u32>> {
    let n = read_len(r, limit)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_u32(r)?);
    }
    Ok(out)
}

pub(crate) fn read_u64s<R: Read>(r: &mut R, limit: usize) -> io::Result<Vec<u64>> {
    let n = read_len(r, limit)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_u64(r)?);
    }
    Ok(out)
}
