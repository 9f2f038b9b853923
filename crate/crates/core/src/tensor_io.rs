//! Named-matrix serialization shared by network parameters and backend models.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SVNM" | count | { name_len | name (utf-8) | rows | cols | rows*cols f32 LE, row-major }*
//! ```

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVNM";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub value: DMatrix<f64>,
}

impl NamedMatrix {
    pub fn new(name: impl Into<String>, value: DMatrix<f64>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

pub fn write_named<W: Write>(mut w: W, items: &[NamedMatrix]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, items.len())?;
    for item in items {
        let name = item.name.as_bytes();
        write_u32(&mut w, name.len())?;
        w.write_all(name)?;
        write_u32(&mut w, item.value.nrows())?;
        write_u32(&mut w, item.value.ncols())?;
        let mut buf = Vec::with_capacity(item.value.len() * 4);
        for r in 0..item.value.nrows() {
            for c in 0..item.value.ncols() {
                buf.extend_from_slice(&(item.value[(r, c)] as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_named<R: Read>(mut r: R) -> Result<Vec<NamedMatrix>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a named-matrix file (bad magic)".into()));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not valid utf-8".into()))?;
        let rows = read_u32(&mut r)?;
        let cols = read_u32(&mut r)?;
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let floats: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(NamedMatrix {
            name,
            value: DMatrix::from_row_slice(rows, cols, &floats),
        });
    }
    Ok(out)
}

/// Looks up a tensor by name, removing it from the list.
pub fn take(items: &mut Vec<NamedMatrix>, name: &str) -> Result<DMatrix<f64>> {
    let pos = items
        .iter()
        .position(|m| m.name == name)
        .ok_or_else(|| Error::Missing(format!("tensor `{name}`")))?;
    Ok(items.remove(pos).value)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Rounds every entry through `f32`, the precision used on disk.
pub fn quantize_f32(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v as f32 as f64)
}
