//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CRQP"
//! version u32 = 1
//! count   u32
//! count x { name_len u32, name utf-8, rows u64, cols u64, rows*cols f64 (row-major, LE bits) }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::{Matrix, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CRQP";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &ParamSet, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.nrows() as u64).to_le_bytes())?;
        w.write_all(&(p.value.ncols() as u64).to_le_bytes())?;
        for v in p.value.iter() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::InvalidInput("not a parameter checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::InvalidInput(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_bits(u64::from_le_bytes(read_array(&mut r)?)));
        }
        let m = Matrix::from_shape_vec((rows, cols), data).map_err(|e| Error::InvalidInput(e.to_string()))?;
        params.add(name, m)?;
    }
    Ok(params)
}

pub fn save_params(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_params(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet> {
    let f = std::fs::File::open(path)?;
    read_params(std::io::BufReader::new(f))
}
