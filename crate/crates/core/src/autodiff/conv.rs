//! im2col-based 2-D convolution kernels.

use super::tensor::Real;
use super::AutodiffError;
use crate::parallel;

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output is `ceil(input / stride)`; zero padding split evenly, extra on
    /// the bottom/right.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self, AutodiffError> {
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        };
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(mismatch());
        }
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::InvalidParameter {
                op: "conv2d",
                msg: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        if kh == 0 || kw == 0 {
            return Err(mismatch());
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(mismatch());
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(mismatch());
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: h,
            width: w,
            out_channels: weight[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1 stride-1 unpadded convolutions read the input directly.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1
    }

    /// Maps output coordinate + kernel offset to an input coordinate.
    #[inline]
    fn source(&self, out: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let spatial = self.out_spatial();
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for kh in 0..self.kernel_h {
                for kw in 0..self.kernel_w {
                    let row = (c * self.kernel_h + kh) * self.kernel_w + kw;
                    let dst = &mut col[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, kh, self.pad_top, self.height) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = self
                                        .source(ox, kw, self.pad_left, self.width)
                                        .map_or(T::zero(), |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let spatial = self.out_spatial();
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for kh in 0..self.kernel_h {
                for kw in 0..self.kernel_w {
                    let row = (c * self.kernel_h + kh) * self.kernel_w + kw;
                    let src = &col[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, kh, self.pad_top, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kw, self.pad_left, self.width) {
                                let d = &mut plane[iy * self.width + ix];
                                *d = *d + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let spatial = self.out_spatial();
        let patch = self.patch_len();
        let per_sample = parallel::map_indexed(self.batch, |n| {
            let xs = &x[n * self.in_len()..(n + 1) * self.in_len()];
            let mut out = vec![T::zero(); self.out_channels * spatial];
            let scratch;
            let col: &[T] = if self.is_pointwise() {
                xs
            } else {
                let mut buf = vec![T::zero(); patch * spatial];
                self.im2col(xs, &mut buf);
                scratch = buf;
                &scratch
            };
            T::gemm(
                self.out_channels,
                patch,
                spatial,
                T::one(),
                weight,
                (patch, 1),
                col,
                (spatial, 1),
                T::zero(),
                &mut out,
                (spatial, 1),
            );
            if let Some(b) = bias {
                for (o, row) in out.chunks_exact_mut(spatial).enumerate() {
                    for v in row {
                        *v = *v + b[o];
                    }
                }
            }
            out
        });
        per_sample.concat()
    }

    /// Returns `(dx, dweight, dbias)`. Per-sample partials are reduced in
    /// batch order regardless of thread count.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        weight: &[T],
        grad_out: &[T],
        need_dx: bool,
        need_dw: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
        let spatial = self.out_spatial();
        let patch = self.patch_len();
        let partials = parallel::map_indexed(self.batch, |n| {
            let xs = &x[n * self.in_len()..(n + 1) * self.in_len()];
            let gs = &grad_out[n * self.out_channels * spatial..(n + 1) * self.out_channels * spatial];
            let dw = need_dw.then(|| {
                let scratch;
                let col: &[T] = if self.is_pointwise() {
                    xs
                } else {
                    let mut buf = vec![T::zero(); patch * spatial];
                    self.im2col(xs, &mut buf);
                    scratch = buf;
                    &scratch
                };
                let mut dw = vec![T::zero(); self.out_channels * patch];
                T::gemm(
                    self.out_channels,
                    spatial,
                    patch,
                    T::one(),
                    gs,
                    (spatial, 1),
                    col,
                    (1, spatial),
                    T::zero(),
                    &mut dw,
                    (patch, 1),
                );
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcol = vec![T::zero(); patch * spatial];
                T::gemm(
                    patch,
                    self.out_channels,
                    spatial,
                    T::one(),
                    weight,
                    (1, patch),
                    gs,
                    (spatial, 1),
                    T::zero(),
                    &mut dcol,
                    (spatial, 1),
                );
                if self.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); self.in_len()];
                    self.col2im(&dcol, &mut dx);
                    dx
                }
            });
            let db: Vec<T> = gs
                .chunks_exact(spatial)
                .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
                .collect();
            (dx, dw, db)
        });

        let mut dx_all = need_dx.then(|| Vec::with_capacity(self.batch * self.in_len()));
        let mut dw_all = need_dw.then(|| vec![T::zero(); self.out_channels * patch]);
        let mut db_all = vec![T::zero(); self.out_channels];
        for (dx, dw, db) in partials {
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend(dx);
            }
            if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
                for (a, b) in all.iter_mut().zip(dw) {
                    *a = *a + b;
                }
            }
            for (a, b) in db_all.iter_mut().zip(db) {
                *a = *a + b;
            }
        }
        (dx_all, dw_all, db_all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        w: &[f64],
        geo: &ConvGeometry,
    ) -> Vec<f64> {
        let mut out = vec![0.0; geo.batch * geo.out_channels * geo.out_h * geo.out_w];
        for n in 0..geo.batch {
            for o in 0..geo.out_channels {
                for oy in 0..geo.out_h {
                    for ox in 0..geo.out_w {
                        let mut acc = 0.0;
                        for c in 0..geo.in_channels {
                            for kh in 0..geo.kernel_h {
                                for kw in 0..geo.kernel_w {
                                    let iy = (oy * geo.stride + kh) as isize - geo.pad_top as isize;
                                    let ix = (ox * geo.stride + kw) as isize - geo.pad_left as isize;
                                    if iy < 0 || ix < 0 || iy >= geo.height as isize || ix >= geo.width as isize {
                                        continue;
                                    }
                                    let xi = ((n * geo.in_channels + c) * geo.height + iy as usize) * geo.width + ix as usize;
                                    let wi = ((o * geo.in_channels + c) * geo.kernel_h + kh) * geo.kernel_w + kw;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * geo.out_channels + o) * geo.out_h + oy) * geo.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn same_padding_shapes() {
        let g = ConvGeometry::new(&[1, 3, 8, 8], &[4, 3, 3, 3], 1, Padding::Same).unwrap();
        assert_eq!(g.out_shape(), vec![1, 4, 8, 8]);
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
        let g = ConvGeometry::new(&[1, 3, 7, 8], &[4, 3, 3, 3], 2, Padding::Same).unwrap();
        assert_eq!(g.out_shape(), vec![1, 4, 4, 4]);
        let g = ConvGeometry::new(&[1, 3, 7, 8], &[4, 3, 3, 3], 2, Padding::Valid).unwrap();
        assert_eq!(g.out_shape(), vec![1, 4, 3, 3]);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeometry::new(&[1, 3, 2, 2], &[4, 3, 3, 3], 1, Padding::Valid).is_err());
        assert!(ConvGeometry::new(&[1, 2, 8, 8], &[4, 3, 3, 3], 1, Padding::Same).is_err());
        assert!(ConvGeometry::new(&[1, 3, 8, 8], &[4, 3, 3, 3], 3, Padding::Same).is_err());
    }

    #[test]
    fn im2col_forward_matches_direct_loop() {
        for &(stride, padding, h, w) in &[
            (1, Padding::Same, 6, 5),
            (2, Padding::Same, 7, 6),
            (1, Padding::Valid, 5, 5),
            (2, Padding::Valid, 7, 8),
        ] {
            let geo = ConvGeometry::new(&[2, 2, h, w], &[3, 2, 3, 3], stride, padding).unwrap();
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let got = geo.forward(&x, &wt, None);
            let want = naive_conv(&x, &wt, &geo);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
