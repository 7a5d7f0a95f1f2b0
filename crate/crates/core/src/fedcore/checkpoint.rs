//! Flat binary checkpoint of a parameter store.
//!
//! Entries follow each other with no header: `u32` name length, the UTF-8
//! name, `u32` rank, one `u64` per dimension, then the values as `f64`. All
//! integers and floats are little-endian.

use std::io::{self, Read, Write};

use crate::error::{argument, structural, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

fn io_err(e: io::Error) -> crate::error::Error {
    argument!("checkpoint i/o: {}", e)
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut out: W) -> Result<()> {
    for (name, p) in store.iter() {
        let shape = p.tensor.shape();
        out.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(name.as_bytes()).map_err(io_err)?;
        out.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in shape {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &x in p.tensor.data() {
            out.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

fn take<'a>(rest: &mut &'a [u8], n: usize, total: usize) -> Result<&'a [u8]> {
    if rest.len() < n {
        return Err(structural!("checkpoint truncated at byte {}", total - rest.len()));
    }
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    Ok(head)
}

fn take_u32(rest: &mut &[u8], total: usize) -> Result<usize> {
    Ok(u32::from_le_bytes(take(rest, 4, total)?.try_into().expect("4 bytes")) as usize)
}

fn take_u64(rest: &mut &[u8], total: usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(rest, 8, total)?.try_into().expect("8 bytes")))
}

/// Reads entries until end of input.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(io_err)?;
    let total = bytes.len();
    let mut rest: &[u8] = &bytes;
    let mut out = Vec::new();
    while !rest.is_empty() {
        let len = take_u32(&mut rest, total)?;
        let name = String::from_utf8(take(&mut rest, len, total)?.to_vec())
            .map_err(|_| structural!("checkpoint name is not UTF-8"))?;
        let rank = take_u32(&mut rest, total)?;
        let shape = (0..rank)
            .map(|_| take_u64(&mut rest, total).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| take_u64(&mut rest, total).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites the values of `store` from a checkpoint with the same names and shapes.
pub fn load_checkpoint<R: Read>(store: &mut ParamStore, input: R) -> Result<()> {
    let entries = read_checkpoint(input)?;
    if entries.len() != store.len() {
        return Err(structural!("checkpoint has {} entries, model has {}", entries.len(), store.len()));
    }
    for (name, t) in entries {
        store.set(&name, t)?;
    }
    Ok(())
}
