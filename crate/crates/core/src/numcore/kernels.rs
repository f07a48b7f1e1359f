//! Raw slice kernels behind the tape operations. No shape validation happens
//! here; callers pass consistent extents.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the patch matrix: one per (input channel, kernel row, kernel col).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the patch matrix: one per (batch, output row, output col).
    pub fn patch_count(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Lowers `input` (`[B, C, H, W]`) into a `[C*kh*kw, B*Ho*Wo]` patch matrix.
pub fn im2col<T: Element>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols_n = g.patch_count();
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    let plane = g.height * g.width;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let src = &input[(b * g.in_channels + c) * plane..][..plane];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - pad;
                        let dst = &mut dst_row[(b * ho + oh) * wo..][..wo];
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..][..g.width];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - pad;
                            if iw >= 0 && iw < g.width as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, grad_input: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols_n = g.patch_count();
    let plane = g.height * g.width;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let dst = &mut grad_input[(b * g.in_channels + c) * plane..][..plane];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - pad;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[(b * ho + oh) * wo..][..wo];
                        let dst_row = &mut dst[ih as usize * g.width..][..g.width];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - pad;
                            if iw >= 0 && iw < g.width as isize {
                                let d = &mut dst_row[iw as usize];
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[Cout, B*P]` <-> `[B, Cout, P]` layout swap used around the conv GEMM.
pub fn channel_major_to_batch_major<T: Element>(src: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for b in 0..batch {
            let s = &src[(c * batch + b) * plane..][..plane];
            out[(b * channels + c) * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

pub fn batch_major_to_channel_major<T: Element>(src: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = &src[(b * channels + c) * plane..][..plane];
            out[(c * batch + b) * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

/// Per-channel sums over every axis except 1 of a `[B, C, ...]` buffer.
pub fn channel_sums<T: Element>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; channels];
    for b in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += x[(b * channels + c) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    sums
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
}

/// Max pooling; returns outputs and the flat input index each output came from.
/// Ties resolve to the first element in row-major window order.
pub fn max_pool<T: Element>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = g.batch * g.channels * ho * wo;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for bc in 0..g.batch * g.channels {
        let base = bc * g.height * g.width;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best_idx = base + oh * g.stride * g.width + ow * g.stride;
                let mut best = x[best_idx];
                for ki in 0..g.kernel {
                    for kj in 0..g.kernel {
                        let idx = base + (oh * g.stride + ki) * g.width + ow * g.stride + kj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}
