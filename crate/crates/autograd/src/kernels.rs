//! Slice-level kernels shared by the graph ops and by non-differentiable
//! callers (metrics, data preparation).

use crate::scalar::Scalar;

/// How convolution reads outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Periodic wrap-around.
    Circular,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn map_index(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Circular => Some(i.rem_euclid(n as isize) as usize),
            PadMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + kx − pad` lies inside `0..n`.
#[inline]
fn valid_range(n: usize, out: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if n + pad > kx { ((n + pad - kx - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `[C,H,W]` image into a `[C·k·k, OH·OW]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let (s, w) = (g.stride, g.width);
    let plane = g.height * w;
    let npos = oh * ow;
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                let (lo, hi) = valid_range(w, ow, s, kx, g.pad);
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let Some(y) = g.map_index(iy, g.height) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let srow = &src[y * w..(y + 1) * w];
                    if lo < hi {
                        let x0 = lo * s + kx - g.pad;
                        if s == 1 {
                            drow[lo..hi].copy_from_slice(&srow[x0..x0 + hi - lo]);
                        } else {
                            for (d, v) in drow[lo..hi].iter_mut().zip(srow[x0..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                    for ox in (0..lo).chain(hi..ow) {
                        let ix = (ox * s + kx) as isize - g.pad as isize;
                        drow[ox] = match g.map_index(ix, w) {
                            Some(xx) => srow[xx],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let (s, w) = (g.stride, g.width);
    let plane = g.height * w;
    let npos = oh * ow;
    for c in 0..g.channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                let (lo, hi) = valid_range(w, ow, s, kx, g.pad);
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    let Some(y) = g.map_index(iy, g.height) else { continue };
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if lo < hi {
                        let x0 = lo * s + kx - g.pad;
                        if s == 1 {
                            for (d, v) in drow[x0..x0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in drow[x0..].iter_mut().step_by(s).zip(&srow[lo..hi]) {
                                *d += *v;
                            }
                        }
                    }
                    for ox in (0..lo).chain(hi..ow) {
                        let ix = (ox * s + kx) as isize - g.pad as isize;
                        if let Some(xx) = g.map_index(ix, w) {
                            drow[xx] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of a separable linear resampler.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w1: T,
}

/// Bilinear source taps for resizing `n_in` samples to `n_out`
/// (half-pixel centers, clamped at the border).
pub fn bilinear_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w1: T::of(w1) }
        })
        .collect()
}

/// Resizes `planes` stacked `[H,W]` planes to `[OH,OW]`.
pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &src[a.i1 * w..(a.i1 + 1) * w];
            let wy0 = T::one() - a.w1;
            for (ox, b) in tx.iter().enumerate() {
                let wx0 = T::one() - b.w1;
                let top = r0[b.i0] * wx0 + r0[b.i1] * b.w1;
                let bot = r1[b.i0] * wx0 + r1[b.i1] * b.w1;
                dst[oy * ow + ox] = top * wy0 + bot * a.w1;
            }
        }
    }
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let wy0 = T::one() - a.w1;
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let wx0 = T::one() - b.w1;
                d[a.i0 * w + b.i0] += v * wy0 * wx0;
                d[a.i0 * w + b.i1] += v * wy0 * b.w1;
                d[a.i1 * w + b.i0] += v * a.w1 * wx0;
                d[a.i1 * w + b.i1] += v * a.w1 * b.w1;
            }
        }
    }
}

/// Bilinear sample position for one target pixel, border-clamped.
#[derive(Debug, Clone, Copy)]
pub struct Sample<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
}

impl<T: Scalar> Sample<T> {
    pub fn at(sx: T, sy: T, h: usize, w: usize) -> Self {
        let sx = sx.max(T::zero()).min(T::of((w - 1) as f64));
        let sy = sy.max(T::zero()).min(T::of((h - 1) as f64));
        let x0 = sx.floor().to_usize().unwrap_or(0).min(w - 1);
        let y0 = sy.floor().to_usize().unwrap_or(0).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        Sample { x0, x1, y0, y1, fx: sx - T::of(x0 as f64), fy: sy - T::of(y0 as f64) }
    }

    #[inline]
    pub fn read(&self, plane: &[T], w: usize) -> T {
        let one = T::one();
        let top = plane[self.y0 * w + self.x0] * (one - self.fx) + plane[self.y0 * w + self.x1] * self.fx;
        let bot = plane[self.y1 * w + self.x0] * (one - self.fx) + plane[self.y1 * w + self.x1] * self.fx;
        top * (one - self.fy) + bot * self.fy
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], w: usize, v: T) {
        let one = T::one();
        plane[self.y0 * w + self.x0] += v * (one - self.fx) * (one - self.fy);
        plane[self.y0 * w + self.x1] += v * self.fx * (one - self.fy);
        plane[self.y1 * w + self.x0] += v * (one - self.fx) * self.fy;
        plane[self.y1 * w + self.x1] += v * self.fx * self.fy;
    }
}

/// Samples every `[H,W]` plane of `x` at the given per-pixel positions.
pub fn sample_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, at: &[Sample<T>], out: &mut [T]) {
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (d, s) in dst.iter_mut().zip(at) {
            *d = s.read(src, w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for every pad mode.
        for mode in [PadMode::Zero, PadMode::Circular, PadMode::Replicate] {
            let g = ConvGeom { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1, mode };
            let (oh, ow) = g.out_hw();
            let x: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let c: Vec<f64> = (0..g.col_rows() * oh * ow).map(|i| ((i * 3 % 13) as f64) * 0.1).collect();
            let mut cols = vec![0.0; c.len()];
            im2col(&x, &g, &mut cols);
            let mut dx = vec![0.0; x.len()];
            col2im(&c, &g, &mut dx);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{mode:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        let shapes = [(5, 4, 3, 2, 1), (6, 7, 3, 1, 1), (4, 4, 1, 1, 0), (7, 5, 3, 2, 0), (3, 3, 5, 1, 2), (8, 9, 3, 3, 2)];
        for mode in [PadMode::Zero, PadMode::Circular, PadMode::Replicate] {
            for &(height, width, kernel, stride, pad) in &shapes {
                let g = ConvGeom { channels: 2, height, width, kernel, stride, pad, mode };
                let (oh, ow) = g.out_hw();
                let x: Vec<f64> = (0..2 * height * width).map(|i| (i * 7 % 17) as f64 - 8.0).collect();
                let mut cols = vec![f64::NAN; g.col_rows() * oh * ow];
                im2col(&x, &g, &mut cols);
                for c in 0..2 {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    let want = match (g.map_index(iy, height), g.map_index(ix, width)) {
                                        (Some(y), Some(xx)) => x[(c * height + y) * width + xx],
                                        _ => 0.0,
                                    };
                                    let row = (c * kernel + ky) * kernel + kx;
                                    assert_eq!(cols[row * oh * ow + oy * ow + ox], want, "{g:?}");
                                }
                            }
                        }
                    }
                }
                let cv: Vec<f64> = (0..cols.len()).map(|i| ((i * 3 % 13) as f64) * 0.1).collect();
                let mut dx = vec![0.0; x.len()];
                col2im(&cv, &g, &mut dx);
                let lhs: f64 = cols.iter().zip(&cv).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-9, "{g:?}");
            }
        }
    }

    #[test]
    fn halving_resize_averages_pairs() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut out = vec![0.0; 4];
        resize_bilinear(&x, 1, (4, 4), (2, 2), &mut out);
        // Output (0,0) averages rows 0..2 and cols 0..2.
        assert!((out[0] - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn sample_clamps_to_border() {
        let plane = [1.0f64, 2.0, 3.0, 4.0];
        let s = Sample::at(-3.0, 5.0, 2, 2);
        assert_eq!(s.read(&plane, 2), 3.0);
        let mid = Sample::at(0.5, 0.0, 2, 2);
        assert_eq!(mid.read(&plane, 2), 1.5);
    }
}
