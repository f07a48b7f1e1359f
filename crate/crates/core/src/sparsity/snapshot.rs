//! Mask snapshots: `"RSTMASK1"`, u32 layer count, then per layer u32 layer
//! id, u32 ndim, u32 dims, and one 0/1 byte per weight. Little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::SparseNet;

const MAGIC: &[u8; 8] = b"RSTMASK1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRecord {
    pub layer: usize,
    pub shape: Vec<usize>,
    pub mask: Vec<bool>,
}

pub fn write_mask_snapshot(w: &mut impl Write, net: &SparseNet) -> Result<()> {
    let mut out = Vec::from(&MAGIC[..]);
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, net.layers.len());
    for s in &net.layers {
        put(&mut out, s.layer);
        put(&mut out, s.shape.len());
        s.shape.iter().for_each(|&d| put(&mut out, d));
        out.extend(s.mask.iter().map(|&m| m as u8));
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, message: String) -> Error {
        Error::Format { what: "mask snapshot", offset, message }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remain = self.bytes.len() - self.pos;
        if remain < n {
            return Err(self.err(self.pos, format!("truncated: need {n} bytes, {remain} remain")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_mask_snapshot(r: &mut impl Read) -> Result<Vec<MaskRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(c.err(0, "bad magic".into()));
    }
    let count = c.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let layer = c.u32()?;
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let at = c.pos;
        let raw = c.take(shape.iter().product())?;
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(c.err(at + i, format!("mask byte {} is not 0/1", raw[i])));
        }
        records.push(MaskRecord { layer, shape, mask: raw.iter().map(|&b| b == 1).collect() });
    }
    if c.pos != bytes.len() {
        return Err(c.err(c.pos, "trailing bytes".into()));
    }
    Ok(records)
}
