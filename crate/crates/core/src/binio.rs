//! Little-endian helpers shared by the binary file formats.

use std::io::{Read, Write};

use crate::geom::grid::read_exact_or_truncated;
use crate::Result;

pub(crate) fn write_u32<W: Write>(out: &mut W, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64<W: Write>(out: &mut W, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f32s<W: Write>(out: &mut W, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub(crate) fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(input, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_bytes<R: Read>(input: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    read_exact_or_truncated(input, &mut buf, what)?;
    Ok(buf)
}

pub(crate) fn read_f32s<R: Read>(input: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let buf = read_bytes(input, n * 4, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let buf = read_bytes(input, n * 8, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
