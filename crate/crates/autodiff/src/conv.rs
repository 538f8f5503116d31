use ndarray::IxDyn;

use crate::Arr;

/// Geometry shared by `im2col` and `col2im`.
///
/// The image side is laid out `(batch, height, width, channels)`; the column
/// side is `(batch * out_h * out_w, kernel * kernel * channels)` with the
/// patch axis ordered `(ky, kx, channel)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn cols_shape(&self) -> [usize; 2] {
        [
            self.batch * self.out_h() * self.out_w(),
            self.kernel * self.kernel * self.channels,
        ]
    }

    /// The padded input must be at least as large as the sliding window span,
    /// and every patch row must fit. Callers validate shapes before recording.
    pub fn is_valid(&self) -> bool {
        self.kernel > 0
            && self.stride > 0
            && self.height + 2 * self.pad >= self.kernel
            && self.width + 2 * self.pad >= self.kernel
    }
}

/// Gathers sliding-window patches of `img` into a matrix, padding with zeros.
pub(crate) fn im2col(img: &Arr, g: &ConvGeom) -> Arr {
    debug_assert_eq!(img.shape(), g.image_shape());
    let img = img
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&g.image_shape()))
        .unwrap();
    let src = img.as_slice().unwrap();
    let (h, w, c) = (g.height, g.width, g.channels);
    let (oh, ow, k, s, p) = (g.out_h(), g.out_w(), g.kernel, g.stride, g.pad);
    let shape = g.cols_shape();
    let mut out = vec![0.0; shape[0] * shape[1]];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * shape[1];
                for ky in 0..k {
                    let y = (oy * s + ky) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = (ox * s + kx) as isize - p as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let src_off = ((b * h + y as usize) * w + x as usize) * c;
                        let dst_off = row + (ky * k + kx) * c;
                        out[dst_off..dst_off + c]
                            .copy_from_slice(&src[src_off..src_off + c]);
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&shape), out).unwrap()
}

/// Adjoint of `im2col`: scatters patch rows back onto the image grid,
/// accumulating where windows overlap and dropping padded positions.
pub(crate) fn col2im(cols: &Arr, g: &ConvGeom) -> Arr {
    debug_assert_eq!(cols.shape(), g.cols_shape());
    let cols = cols
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&g.cols_shape()))
        .unwrap();
    let src = cols.as_slice().unwrap();
    let (h, w, c) = (g.height, g.width, g.channels);
    let (oh, ow, k, s, p) = (g.out_h(), g.out_w(), g.kernel, g.stride, g.pad);
    let row_len = g.cols_shape()[1];
    let mut out = vec![0.0; g.batch * h * w * c];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * row_len;
                for ky in 0..k {
                    let y = (oy * s + ky) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = (ox * s + kx) as isize - p as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let dst_off = ((b * h + y as usize) * w + x as usize) * c;
                        let src_off = row + (ky * k + kx) * c;
                        for i in 0..c {
                            out[dst_off + i] += src[src_off + i];
                        }
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&g.image_shape()), out).unwrap()
}
