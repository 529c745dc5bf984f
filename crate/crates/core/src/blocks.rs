//! Named blocks of little-endian `f64` matrices, shared by checkpoints and
//! corpus utterance files.
//!
//! Layout after the caller's header: `u32` block count, then per block a
//! `u16` name length, UTF-8 name, `u32` rows, `u32` cols and `rows*cols`
//! values in row-major order.

use std::io::{self, Read, Write};

use ndarray::Array2;

use crate::autodiff::Tensor;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> io::Result<()> {
    w.write_all(&[v])
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_blocks<'a, W: Write>(
    w: &mut W,
    blocks: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    write_u32(w, blocks.len() as u32)?;
    for (name, t) in blocks {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| invalid("block name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        write_u32(w, t.nrows() as u32)?;
        write_u32(w, t.ncols() as u32)?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_blocks<R: Read>(r: &mut R) -> io::Result<Vec<(String, Tensor)>> {
    let n = read_u32(r)?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("block name is not UTF-8"))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| invalid(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}
