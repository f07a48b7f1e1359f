//! Colored-digit datasets with a controllable share of bias-conflicting
//! examples, from synthetic glyphs or MNIST IDX files.

mod blob;
mod color;
mod glyphs;
mod idx;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::objective::GroupTag;

pub use blob::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use color::{colorize, make_unbiased_test, FOREGROUND_THRESHOLD, PALETTE};
pub use glyphs::{glyph_template, synth_glyphs, synth_glyphs_with, GlyphOptions, GLYPH_SIZE};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels};

/// Grayscale images in `[0, 1]`, row-major `[count, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImages {
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.count);
        Self { count: n, height: self.height, width: self.width, pixels: self.pixels[..n * self.height * self.width].to_vec() }
    }
}

/// A borrowed view of one colored example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupedExample<'a> {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: &'a [f32],
    pub label: u8,
    /// Palette index of the digit color.
    pub bias_attr: u8,
    pub group: GroupTag,
}

/// Colored images `[count, 3, H, W]` with labels and color indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub colors: Vec<u8>,
}

/// Images, targets and group tags for a set of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Vec<usize>,
    pub tags: Vec<GroupTag>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len()..(i + 1) * self.image_len()]
    }

    /// Aligned exactly when the color is the label's own palette entry.
    pub fn group(&self, i: usize) -> GroupTag {
        if self.colors[i] == self.labels[i] {
            GroupTag::Aligned
        } else {
            GroupTag::Conflicting
        }
    }

    pub fn example(&self, i: usize) -> GroupedExample<'_> {
        GroupedExample { image: self.image(i), label: self.labels[i], bias_attr: self.colors[i], group: self.group(i) }
    }

    pub fn conflicting_count(&self) -> usize {
        (0..self.count).filter(|&i| self.group(i).is_conflicting()).count()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.count {
                return Err(Error::invalid(format!("example {i} out of range for {} examples", self.count)));
            }
            data.extend_from_slice(self.image(i));
        }
        Ok(Batch {
            images: Tensor::new([indices.len(), 3, self.height, self.width], data)?,
            targets: indices.iter().map(|&i| self.labels[i] as usize).collect(),
            tags: indices.iter().map(|&i| self.group(i)).collect(),
        })
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.count);
        Self {
            count: n,
            height: self.height,
            width: self.width,
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            colors: self.colors[..n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    SynthGlyphs,
    /// A directory with the four standard MNIST IDX files.
    Idx(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasedDatasetSpec {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub conflict_ratio: f64,
    pub seed: u64,
}

/// Stream offset separating synthetic test glyphs from training glyphs.
const TEST_GLYPH_OFFSET: u64 = 1 << 40;

impl BiasedDatasetSpec {
    /// The biased training split and the unbiased test split.
    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::invalid("train and test sizes must be positive"));
        }
        let ((train_g, train_l), (test_g, test_l)) = match &self.source {
            DataSource::SynthGlyphs => (
                synth_glyphs_with(self.n_train, self.seed, 0, GlyphOptions::default()),
                synth_glyphs_with(self.n_test, self.seed, TEST_GLYPH_OFFSET, GlyphOptions::default()),
            ),
            DataSource::Idx(dir) => {
                let split = |images: &str, labels: &str, n: usize| -> Result<(GrayImages, Vec<u8>)> {
                    let (g, l) = load_idx(&dir.join(images), &dir.join(labels))?;
                    if g.count < n {
                        return Err(Error::invalid(format!("{images} has {} images, {n} requested", g.count)));
                    }
                    Ok((g.take(n), l[..n].to_vec()))
                };
                (
                    split("train-images-idx3-ubyte", "train-labels-idx1-ubyte", self.n_train)?,
                    split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", self.n_test)?,
                )
            }
        };
        Ok((colorize(&train_g, &train_l, self.conflict_ratio, self.seed)?, make_unbiased_test(&test_g, &test_l, self.seed)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_builds_deterministic_splits() {
        let spec = BiasedDatasetSpec { source: DataSource::SynthGlyphs, n_train: 500, n_test: 50, conflict_ratio: 0.02, seed: 7 };
        let (train, test) = spec.build().unwrap();
        assert_eq!(train.conflicting_count(), 10);
        assert_eq!(test.count, 50);
        let (train2, test2) = spec.build().unwrap();
        assert_eq!((train, test), (train2, test2));
    }

    #[test]
    fn batch_collects_rows() {
        let (g, l) = synth_glyphs(1, 0);
        let d = colorize(&g, &l, 0.2, 0).unwrap();
        let b = d.batch(&[3, 1]).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 28, 28]);
        assert_eq!(b.targets, vec![3, 1]);
        assert_eq!(&b.images.data()[..d.image_len()], d.image(3));
        assert!(d.batch(&[10]).is_err());
    }
}
