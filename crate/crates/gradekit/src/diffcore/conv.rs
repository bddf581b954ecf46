//! Raw 3D convolution, pooling, and upsampling kernels.
//!
//! Convolution is im2col + GEMM, processed one batch sample at a time to
//! bound the column-buffer size. Backward recomputes the column matrix from
//! the saved input instead of keeping it alive across the whole graph.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::Element;

pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_spatial: [usize; 3],
    pub kernel: [usize; 3],
    pub out_spatial: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_dim(i: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = i + 2 * padding;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_voxels(&self) -> usize {
        self.out_spatial.iter().product()
    }

    pub fn in_voxels(&self) -> usize {
        self.in_spatial.iter().product()
    }
}

/// Unfolds one `[C, D, H, W]` sample into a `[C*kd*kh*kw, OD*OH*OW]` matrix.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Array2<T> {
    let [kd, kh, kw] = g.kernel;
    let [d, h, w] = g.in_spatial;
    let [od, oh, ow] = g.out_spatial;
    let ov = od * oh * ow;
    let mut cols = Array2::<T>::zeros((g.col_rows(), ov));
    let cols_slice = cols.as_slice_mut().expect("freshly allocated is contiguous");
    let s = g.stride;
    let p = g.padding as isize;

    for c in 0..g.in_channels {
        for a in 0..kd {
            for b in 0..kh {
                for k in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + k;
                    let row_base = row * ov;
                    for oz in 0..od {
                        let iz = (oz * s) as isize + a as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + b as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = row_base + (oz * oh + oy) * ow;
                            let src = ((c * d + iz as usize) * h + iy as usize) * w;
                            let shift = k as isize - p;
                            if s == 1 {
                                let start = (-shift).max(0) as usize;
                                let end = (w as isize - shift).clamp(0, ow as isize) as usize;
                                if start < end {
                                    let s0 = (start as isize + shift) as usize;
                                    cols_slice[dst + start..dst + end]
                                        .copy_from_slice(&x[src + s0..src + s0 + (end - start)]);
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * s) as isize + shift;
                                    if ix >= 0 && ix < w as isize {
                                        cols_slice[dst + ox] = x[src + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column-matrix gradient back onto one input sample.
pub(crate) fn col2im_add<T: Element>(dcols: &Array2<T>, g: &ConvGeometry, dx: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [d, h, w] = g.in_spatial;
    let [od, oh, ow] = g.out_spatial;
    let ov = od * oh * ow;
    let dcols_slice = dcols.as_slice().expect("gemm output is contiguous");
    let s = g.stride;
    let p = g.padding as isize;

    for c in 0..g.in_channels {
        for a in 0..kd {
            for b in 0..kh {
                for k in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + k;
                    let row_base = row * ov;
                    for oz in 0..od {
                        let iz = (oz * s) as isize + a as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + b as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = row_base + (oz * oh + oy) * ow;
                            let dst = ((c * d + iz as usize) * h + iy as usize) * w;
                            let shift = k as isize - p;
                            for ox in 0..ow {
                                let ix = (ox * s) as isize + shift;
                                if ix >= 0 && ix < w as isize {
                                    dx[dst + ix as usize] += dcols_slice[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = weight2d . cols + bias`, written into one output sample.
pub(crate) fn gemm_into<T: Element>(
    weight2d: ArrayView2<T>,
    cols: &Array2<T>,
    bias: &[T],
    out: &mut [T],
) {
    let prod = weight2d.dot(cols);
    let ov = cols.ncols();
    let prod_slice = prod.as_slice().expect("gemm output is contiguous");
    for (c, &bc) in bias.iter().enumerate() {
        let dst = &mut out[c * ov..(c + 1) * ov];
        let src = &prod_slice[c * ov..(c + 1) * ov];
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = v + bc;
        }
    }
}

/// 2x max pooling over one `[C, D, H, W]` sample; records flat argmax
/// indices (ties keep the first element in (dz, dy, dx) scan order).
pub(crate) fn maxpool_forward<T: Element>(
    x: &[T],
    channels: usize,
    spatial: [usize; 3],
    out: &mut Vec<T>,
    argmax: &mut Vec<u32>,
    sample_offset: usize,
) {
    let [d, h, w] = spatial;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    for c in 0..channels {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = 0usize;
                    let mut best = T::neg_infinity();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((c * d + 2 * oz + dz) * h + 2 * oy + dy) * w
                                    + 2 * ox
                                    + dx;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push((sample_offset + best_idx) as u32);
                }
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling of `[C, D, H, W]` into `[C, 2D, 2H, 2W]`.
pub(crate) fn upsample_forward<T: Element>(
    x: &[T],
    channels: usize,
    spatial: [usize; 3],
    out: &mut [T],
) {
    let [d, h, w] = spatial;
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    for c in 0..channels {
        for z in 0..ud {
            for y in 0..uh {
                let src = ((c * d + z / 2) * h + y / 2) * w;
                let dst = ((c * ud + z) * uh + y) * uw;
                for xx in 0..uw {
                    out[dst + xx] = x[src + xx / 2];
                }
            }
        }
    }
}

/// Backward of nearest 2x upsampling: each input cell sums its 8 children.
pub(crate) fn upsample_backward<T: Element>(
    dout: &[T],
    channels: usize,
    in_spatial: [usize; 3],
    dx: &mut [T],
) {
    let [d, h, w] = in_spatial;
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    for c in 0..channels {
        for z in 0..ud {
            for y in 0..uh {
                let src = ((c * ud + z) * uh + y) * uw;
                let dst = ((c * d + z / 2) * h + y / 2) * w;
                for xx in 0..uw {
                    dx[dst + xx / 2] += dout[src + xx];
                }
            }
        }
    }
}

pub(crate) fn gemm_owned<T: Element>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    a.dot(&b)
}

pub(crate) fn add_into<T: Element>(mut acc: ArrayViewMut2<T>, add: &Array2<T>) {
    acc.zip_mut_with(add, |a, &b| *a += b);
}
