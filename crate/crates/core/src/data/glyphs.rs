//! Ten stroke-drawn 28x28 digit templates, rendered with random shifts and
//! pixel noise. Needs no downloads.

use std::sync::OnceLock;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::{keyed, Stream};

use super::GrayImages;

pub const GLYPH_SIZE: usize = 28;

type Segment = (f32, f32, f32, f32);

const TOP: Segment = (9.0, 5.0, 18.0, 5.0);
const MID: Segment = (9.0, 13.5, 18.0, 13.5);
const BOTTOM: Segment = (9.0, 22.0, 18.0, 22.0);
const LEFT_UP: Segment = (9.0, 5.0, 9.0, 13.5);
const LEFT_DOWN: Segment = (9.0, 13.5, 9.0, 22.0);
const RIGHT_UP: Segment = (18.0, 5.0, 18.0, 13.5);
const RIGHT_DOWN: Segment = (18.0, 13.5, 18.0, 22.0);

const STROKES: [&[Segment]; 10] = [
    &[TOP, BOTTOM, LEFT_UP, LEFT_DOWN, RIGHT_UP, RIGHT_DOWN],
    &[(14.0, 5.0, 14.0, 22.0), (11.0, 8.0, 14.0, 5.0), (11.0, 22.0, 17.0, 22.0)],
    &[TOP, RIGHT_UP, (18.0, 13.5, 9.0, 22.0), BOTTOM],
    &[TOP, RIGHT_UP, RIGHT_DOWN, (11.0, 13.5, 18.0, 13.5), BOTTOM],
    &[(15.0, 5.0, 8.0, 16.0), (8.0, 16.0, 19.0, 16.0), (15.0, 5.0, 15.0, 22.0)],
    &[TOP, LEFT_UP, MID, RIGHT_DOWN, BOTTOM],
    &[TOP, LEFT_UP, LEFT_DOWN, BOTTOM, RIGHT_DOWN, MID],
    &[TOP, (18.0, 5.0, 11.0, 22.0)],
    &[TOP, MID, BOTTOM, LEFT_UP, LEFT_DOWN, RIGHT_UP, RIGHT_DOWN],
    &[TOP, LEFT_UP, MID, RIGHT_UP, RIGHT_DOWN, BOTTOM],
];

fn segment_distance(px: f32, py: f32, (x0, y0, x1, y1): Segment) -> f32 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn rasterize(strokes: &[Segment]) -> Vec<f32> {
    let mut img = vec![0.0; GLYPH_SIZE * GLYPH_SIZE];
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let d = strokes.iter().map(|&s| segment_distance(x as f32, y as f32, s)).fold(f32::INFINITY, f32::min);
            img[y * GLYPH_SIZE + x] = (2.0 - d).clamp(0.0, 0.8) / 0.8;
        }
    }
    img
}

/// The noiseless, centered template for `class` (0–9), row-major 28x28.
pub fn glyph_template(class: usize) -> &'static [f32] {
    static TEMPLATES: OnceLock<Vec<Vec<f32>>> = OnceLock::new();
    &TEMPLATES.get_or_init(|| STROKES.iter().map(|s| rasterize(s)).collect())[class]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphOptions {
    /// Maximum translation in pixels along each axis.
    pub jitter: i32,
    pub noise_std: f64,
}

impl Default for GlyphOptions {
    fn default() -> Self {
        Self { jitter: 2, noise_std: 0.05 }
    }
}

/// `n_per_class` samples of every class, labels cycling `0, 1, ..., 9`.
pub fn synth_glyphs(n_per_class: usize, seed: u64) -> (GrayImages, Vec<u8>) {
    synth_glyphs_with(10 * n_per_class, seed, 0, GlyphOptions::default())
}

/// `count` samples drawn from per-example streams `first_index..`; the
/// label of sample `first_index + i` is `(first_index + i) % 10`.
pub fn synth_glyphs_with(count: usize, seed: u64, first_index: u64, options: GlyphOptions) -> (GrayImages, Vec<u8>) {
    let plane = GLYPH_SIZE * GLYPH_SIZE;
    let mut pixels = vec![0.0f32; count * plane];
    let mut labels = Vec::with_capacity(count);
    let noise = Normal::new(0.0, options.noise_std.max(0.0)).expect("finite noise level");
    for (i, img) in pixels.chunks_mut(plane).enumerate() {
        let index = first_index + i as u64;
        let class = (index % 10) as usize;
        labels.push(class as u8);
        let mut rng = keyed(seed, Stream::Glyphs, index);
        let (dx, dy) = if options.jitter > 0 {
            (rng.gen_range(-options.jitter..=options.jitter), rng.gen_range(-options.jitter..=options.jitter))
        } else {
            (0, 0)
        };
        let template = glyph_template(class);
        for y in 0..GLYPH_SIZE as i32 {
            for x in 0..GLYPH_SIZE as i32 {
                let (sx, sy) = (x - dx, y - dy);
                let base = if (0..GLYPH_SIZE as i32).contains(&sx) && (0..GLYPH_SIZE as i32).contains(&sy) {
                    template[sy as usize * GLYPH_SIZE + sx as usize]
                } else {
                    0.0
                };
                let v = if options.noise_std > 0.0 { base + noise.sample(&mut rng) as f32 } else { base };
                img[y as usize * GLYPH_SIZE + x as usize] = v.clamp(0.0, 1.0);
            }
        }
    }
    (GrayImages { count, height: GLYPH_SIZE, width: GLYPH_SIZE, pixels }, labels)
}
