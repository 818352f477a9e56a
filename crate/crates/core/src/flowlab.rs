//! Optical flow fields, forward-backward occlusion masks and Middlebury
//! `.flo` I/O.

use std::path::Path;

use chromalink_autograd::kernels::Sample;
use chromalink_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;
const FIXED_POINT_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    /// Defined on frame `t−1`: a pixel at `x` moves to `x + F(x)` in frame `t`.
    Forward,
    /// Defined on frame `t`: a pixel at `y` came from `y + B(y)` in frame `t−1`.
    Backward,
}

/// Pixel displacements stored as planes `2×H×W` (`u` then `v`).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub uv: Tensor<f32>,
    pub direction: FlowDirection,
}

impl FlowField {
    pub fn new(uv: Tensor<f32>, direction: FlowDirection) -> Result<Self> {
        ensure_shape(uv.rank() == 3 && uv.dim(0) == 2, || format!("flow must be 2×H×W, got {:?}", uv.shape()))?;
        if !uv.all_finite() {
            return Err(Error::Input("flow contains non-finite values".into()));
        }
        Ok(FlowField { uv, direction })
    }

    pub fn zeros(h: usize, w: usize, direction: FlowDirection) -> Self {
        FlowField { uv: Tensor::zeros(&[2, h, w]), direction }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32, direction: FlowDirection) -> Self {
        let n = h * w;
        FlowField { uv: Tensor::from_fn(&[2, h, w], |i| if i < n { dx } else { dy }), direction }
    }

    pub fn height(&self) -> usize {
        self.uv.dim(1)
    }

    pub fn width(&self) -> usize {
        self.uv.dim(2)
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let (h, w) = (self.height(), self.width());
        (self.uv.data()[y * w + x], self.uv.data()[h * w + y * w + x])
    }

    /// Bilinear lookup with border clamping.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (h, w) = (self.height(), self.width());
        let s = Sample::<f64>::at(x, y, h, w);
        let d = self.uv.data();
        let read = |plane: &[f32]| {
            let v = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
            (1.0 - s.fy) * ((1.0 - s.fx) * v(s.y0, s.x0) + s.fx * v(s.y0, s.x1))
                + s.fy * ((1.0 - s.fx) * v(s.y1, s.x0) + s.fx * v(s.y1, s.x1))
        };
        (read(&d[..h * w]), read(&d[h * w..]))
    }

    /// Displacement `D` on the target grid such that `target(p) = source(p − D(p))`.
    pub fn target_displacement(&self) -> Vec<[f64; 2]> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = self.at(x, y);
                let d = match self.direction {
                    FlowDirection::Backward => [-(u as f64), -(v as f64)],
                    FlowDirection::Forward => {
                        let mut d = [u as f64, v as f64];
                        for _ in 0..FIXED_POINT_ITERS {
                            let (nu, nv) = self.sample(x as f64 - d[0], y as f64 - d[1]);
                            d = [nu, nv];
                        }
                        d
                    }
                };
                out.push(d);
            }
        }
        out
    }

    /// Per-pixel bilinear taps reading the source frame for backward warping.
    pub fn warp_samples<T: Scalar>(&self) -> Vec<Sample<T>> {
        let (h, w) = (self.height(), self.width());
        self.target_displacement()
            .iter()
            .enumerate()
            .map(|(p, d)| Sample::at(T::of((p % w) as f64 - d[0]), T::of((p / w) as f64 - d[1]), h, w))
            .collect()
    }

    /// Bilinear resample to `h×w`, scaling `u` by `w/W` and `v` by `h/H`.
    pub fn resized(&self, h: usize, w: usize) -> FlowField {
        let (oh, ow) = (self.height(), self.width());
        if (oh, ow) == (h, w) {
            return self.clone();
        }
        let mut uv = crate::data::resize_planes(&self.uv, h, w);
        let (sx, sy) = (w as f32 / ow as f32, h as f32 / oh as f32);
        let n = h * w;
        for (i, v) in uv.data_mut().iter_mut().enumerate() {
            *v *= if i < n { sx } else { sy };
        }
        FlowField { uv, direction: self.direction }
    }
}

/// Binary visibility map, `1` where a temporal comparison is trusted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl OcclusionMask {
    pub fn full(height: usize, width: usize) -> Self {
        OcclusionMask { height, width, data: vec![1; height * width] }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        OcclusionMask { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        OcclusionMask { height, width, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m != 0).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| if self.data[i] != 0 { T::one() } else { T::zero() })
    }

    /// Nearest-neighbour resample.
    pub fn resized(&self, h: usize, w: usize) -> OcclusionMask {
        OcclusionMask::from_fn(h, w, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / w as f64) as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / h as f64) as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionThresholds {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for OcclusionThresholds {
    fn default() -> Self {
        OcclusionThresholds { alpha1: 0.01, alpha2: 0.5 }
    }
}

/// Forward-backward consistency check. The mask lives on `w`'s grid; `w_hat`
/// is the opposite-direction flow defined on the grid `w` points into.
pub fn occlusion_mask(w: &FlowField, w_hat: &FlowField, th: OcclusionThresholds) -> Result<OcclusionMask> {
    ensure_shape(w.uv.shape() == w_hat.uv.shape(), || {
        format!("flow dims differ: {:?} vs {:?}", w.uv.shape(), w_hat.uv.shape())
    })?;
    let (h, wd) = (w.height(), w.width());
    Ok(OcclusionMask::from_fn(h, wd, |x, y| {
        let (u, v) = w.at(x, y);
        let (tx, ty) = (x as f64 + u as f64, y as f64 + v as f64);
        if tx < 0.0 || ty < 0.0 || tx > (wd - 1) as f64 || ty > (h - 1) as f64 {
            return false;
        }
        let (bu, bv) = w_hat.sample(tx, ty);
        let (su, sv) = (u as f64 + bu, v as f64 + bv);
        let lhs = su * su + sv * sv;
        let rhs = th.alpha1 * ((u as f64).powi(2) + (v as f64).powi(2) + bu * bu + bv * bv) + th.alpha2;
        lhs <= rhs
    }))
}

/// Constant translation by `(dx, dy)` and its inverse.
pub fn synth_flow_translate(h: usize, w: usize, dx: f32, dy: f32) -> Result<(FlowField, FlowField)> {
    let lim = h.min(w) as f32 / 2.0;
    if dx.abs() >= lim || dy.abs() >= lim {
        return Err(Error::Input(format!("translation ({dx}, {dy}) must stay below {lim} px")));
    }
    Ok((
        FlowField::constant(h, w, dx, dy, FlowDirection::Forward),
        FlowField::constant(h, w, -dx, -dy, FlowDirection::Backward),
    ))
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let d = flow.uv.data();
    for p in 0..h * w {
        out.extend_from_slice(&d[p].to_le_bytes());
        out.extend_from_slice(&d[h * w + p].to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path, direction: FlowDirection) -> Result<FlowField> {
    let word = |off: usize| -> Result<[u8; 4]> {
        bytes
            .get(off..off + 4)
            .map(|b| b.try_into().unwrap())
            .ok_or_else(|| Error::format(path, format!("truncated at byte {}: need 4 bytes at offset {off}", bytes.len())))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(Error::format(path, format!("bad magic at byte 0: expected {FLO_MAGIC}, found {magic}")));
    }
    let w = i32::from_le_bytes(word(4)?);
    let h = i32::from_le_bytes(word(8)?);
    if w <= 0 || h <= 0 || w > 1 << 15 || h > 1 << 15 {
        return Err(Error::format(path, format!("bad dimensions {w}×{h} at byte 4")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(Error::format(path, format!("truncated at byte {}: expected {need} bytes", bytes.len())));
    }
    let n = w * h;
    let mut uv = vec![0f32; 2 * n];
    for p in 0..n {
        let off = 12 + 8 * p;
        uv[p] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        uv[n + p] = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
    }
    let uv = Tensor::from_vec(&[2, h, w], uv)?;
    if !uv.all_finite() {
        return Err(Error::format(path, "non-finite flow values"));
    }
    Ok(FlowField { uv, direction })
}

pub fn save_flow(path: &Path, flow: &FlowField) -> Result<()> {
    std::fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn load_flow(path: &Path, direction: FlowDirection) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path, direction)
}
