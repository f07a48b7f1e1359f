use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{keyed, stream, Stream};

use super::{Dataset, GrayImages};

/// Ten well-separated RGB colors; class `c` is paired with `PALETTE[c]`.
pub const PALETTE: [[f32; 3]; 10] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 1.0, 0.5],
    [1.0, 1.0, 1.0],
];

/// Pixels above this gray level count as foreground and take the color.
pub const FOREGROUND_THRESHOLD: f32 = 0.1;

fn paint(gray: &GrayImages, labels: &[u8], colors: Vec<u8>) -> Dataset {
    let plane = gray.height * gray.width;
    let mut images = vec![0.0f32; gray.count * 3 * plane];
    for (i, src) in gray.pixels.chunks(plane).enumerate() {
        let rgb = PALETTE[colors[i] as usize];
        let dst = &mut images[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, &v) in src.iter().enumerate() {
            if v > FOREGROUND_THRESHOLD {
                for c in 0..3 {
                    dst[c * plane + p] = rgb[c] * v;
                }
            }
        }
    }
    Dataset {
        count: gray.count,
        height: gray.height,
        width: gray.width,
        images,
        labels: labels.to_vec(),
        colors,
    }
}

fn check(gray: &GrayImages, labels: &[u8]) -> Result<()> {
    if gray.count != labels.len() {
        return Err(Error::invalid(format!("{} images but {} labels", gray.count, labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::invalid(format!("label {l} outside 0..=9")));
    }
    Ok(())
}

/// Colors each digit with its class color, except exactly
/// `round(conflict_ratio * N)` uniformly chosen examples that get one of the
/// nine other colors uniformly at random.
pub fn colorize(gray: &GrayImages, labels: &[u8], conflict_ratio: f64, seed: u64) -> Result<Dataset> {
    check(gray, labels)?;
    if !(conflict_ratio > 0.0 && conflict_ratio < 1.0) {
        return Err(Error::invalid(format!("conflict ratio {conflict_ratio} outside (0, 1)")));
    }
    let n = gray.count;
    let k = (conflict_ratio * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "{n} examples at conflict ratio {conflict_ratio} yield no conflicting example"
        )));
    }
    let mut colors = labels.to_vec();
    let mut rng = stream(seed, Stream::Colorize);
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let shift = rng.gen_range(1..10u8);
        colors[i] = (labels[i] + shift) % 10;
    }
    Ok(paint(gray, labels, colors))
}

/// Colors drawn uniformly from all ten palette entries, independent of the
/// label.
pub fn make_unbiased_test(gray: &GrayImages, labels: &[u8], seed: u64) -> Result<Dataset> {
    check(gray, labels)?;
    let colors = (0..gray.count).map(|i| keyed(seed, Stream::TestColors, i as u64).gen_range(0..10u8)).collect();
    Ok(paint(gray, labels, colors))
}
