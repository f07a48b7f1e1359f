//! Dataset blobs: `"RSTDATA1"`, u32 count, u32 channels (3), u32 height,
//! u32 width, f32 little-endian images, then one byte per label and one per
//! color index.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

const MAGIC: &[u8; 8] = b"RSTDATA1";
const HEADER: usize = 8 + 16;

pub fn write_dataset(w: &mut impl Write, d: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER + d.images.len() * 4 + 2 * d.count);
    out.extend_from_slice(MAGIC);
    for v in [d.count, 3, d.height, d.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    d.images.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out.extend_from_slice(&d.labels);
    out.extend_from_slice(&d.colors);
    w.write_all(&out)?;
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let err = |offset: usize, message: String| Error::Format { what: "dataset blob", offset, message };
    if bytes.len() < HEADER {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (count, channels, height, width) = (field(0), field(1), field(2), field(3));
    if channels != 3 {
        return Err(err(12, format!("expected 3 channels, found {channels}")));
    }
    let pixels = count * 3 * height * width;
    let expected = HEADER + 4 * pixels + 2 * count;
    if bytes.len() != expected {
        return Err(err(bytes.len().min(expected), format!("expected {expected} bytes in total, found {}", bytes.len())));
    }
    let images: Vec<f32> =
        bytes[HEADER..HEADER + 4 * pixels].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let labels = bytes[HEADER + 4 * pixels..][..count].to_vec();
    let colors = bytes[HEADER + 4 * pixels + count..].to_vec();
    if let Some(i) = labels.iter().chain(&colors).position(|&b| b > 9) {
        return Err(err(HEADER + 4 * pixels + i, "label or color index outside 0..=9".into()));
    }
    Ok(Dataset { count, height, width, images, labels, colors })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut f, d)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut std::fs::File::open(path)?)
}
