//! IDX files: big-endian magic (`0x00000803` images, `0x00000801` labels),
//! one u32 per dimension, then unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};

use super::GrayImages;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { what: "IDX file", offset, message: message.into() }
}

fn read_header(bytes: &[u8], magic: u32, ndim: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic number"));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(format_err(0, format!("expected magic {magic:#010x}, found {found:#010x}")));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(bytes.len(), format!("truncated header: {ndim} dimension sizes expected")));
    }
    Ok((0..ndim).map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize).collect())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let available = bytes.len() - offset;
    if available < len {
        return Err(format_err(bytes.len(), format!("truncated payload: expected {len} bytes, found {available}")));
    }
    if available > len {
        return Err(format_err(offset + len, format!("{} unexpected trailing bytes", available - len)));
    }
    Ok(&bytes[offset..])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<GrayImages> {
    let dims = read_header(bytes, IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let raw = payload(bytes, 16, n * h * w)?;
    Ok(GrayImages { count: n, height: h, width: w, pixels: raw.iter().map(|&b| b as f32 / 255.0).collect() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let n = read_header(bytes, LABELS_MAGIC, 1)?[0];
    let raw = payload(bytes, 8, n)?;
    if let Some(i) = raw.iter().position(|&l| l > 9) {
        return Err(format_err(8 + i, format!("label {} outside 0..=9", raw[i])));
    }
    Ok(raw.to_vec())
}

/// Reads an image file and its label file; counts must agree.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(GrayImages, Vec<u8>)> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let lbls = parse_idx_labels(&std::fs::read(labels)?)?;
    if imgs.count != lbls.len() {
        return Err(format_err(
            4,
            format!("{} holds {} images but {} holds {} labels", images.display(), imgs.count, labels.display(), lbls.len()),
        ));
    }
    Ok((imgs, lbls))
}

/// Serializes grayscale images (rounded back to bytes) in IDX form.
pub fn encode_idx_images(images: &GrayImages) -> Vec<u8> {
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [images.count, images.height, images.width] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
