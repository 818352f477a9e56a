//! sRGB (D65) ↔ normalized CIELAB.
//!
//! RGB images are planar `3×H×W` tensors in `[0,1]`. Lab frames store
//! `l = L/50 − 1` and `ab = (a, b)/110`.

use chromalink_autograd::{Graph, Scalar, Tensor, Var};

use crate::error::{ensure_shape, Error, Result};

pub const AB_SCALE: f64 = 110.0;
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
/// D65 white as the image of RGB (1,1,1), so neutral Lab maps to R = G = B.
const WHITE: [f64; 3] = row_sums(&RGB_TO_XYZ);
const XYZ_TO_RGB: [[f64; 3]; 3] = inverse3(&RGB_TO_XYZ);

const fn row_sums(m: &[[f64; 3]; 3]) -> [f64; 3] {
    [m[0][0] + m[0][1] + m[0][2], m[1][0] + m[1][1] + m[1][2], m[2][0] + m[2][1] + m[2][2]]
}

const fn cofactor(m: &[[f64; 3]; 3], i: usize, j: usize) -> f64 {
    let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
    let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
    m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
}

const fn inverse3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * cofactor(m, 0, 0) + m[0][1] * cofactor(m, 0, 1) + m[0][2] * cofactor(m, 0, 2);
    // Entry (i, j) of the inverse is cofactor (j, i) over the determinant.
    [
        [cofactor(m, 0, 0) / det, cofactor(m, 1, 0) / det, cofactor(m, 2, 0) / det],
        [cofactor(m, 0, 1) / det, cofactor(m, 1, 1) / det, cofactor(m, 2, 1) / det],
        [cofactor(m, 0, 2) / det, cofactor(m, 1, 2) / det, cofactor(m, 2, 2) / det],
    ]
}

const DELTA: f64 = 6.0 / 29.0;

/// A frame in normalized CIELAB.
#[derive(Debug, Clone, PartialEq)]
pub struct LabFrame<T> {
    /// `H×W`, in `[-1,1]`.
    pub l: Tensor<T>,
    /// `2×H×W`, in `[-1,1]`.
    pub ab: Tensor<T>,
}

impl<T: Scalar> LabFrame<T> {
    pub fn new(l: Tensor<T>, ab: Tensor<T>) -> Result<Self> {
        ensure_shape(l.rank() == 2, || format!("l must be H×W, got {:?}", l.shape()))?;
        ensure_shape(ab.shape() == [2, l.dim(0), l.dim(1)], || {
            format!("ab {:?} does not match l {:?}", ab.shape(), l.shape())
        })?;
        if !l.all_finite() || !ab.all_finite() {
            return Err(Error::Input("lab frame contains non-finite values".into()));
        }
        Ok(LabFrame { l, ab })
    }

    pub fn gray(l: Tensor<T>) -> Result<Self> {
        let ab = Tensor::zeros(&[2, l.dim(0), l.dim(1)]);
        Self::new(l, ab)
    }

    pub fn height(&self) -> usize {
        self.l.dim(0)
    }

    pub fn width(&self) -> usize {
        self.l.dim(1)
    }

    /// `3×H×W` stack of `(l, a, b)`.
    pub fn to_lab_tensor(&self) -> Tensor<T> {
        let mut data = self.l.data().to_vec();
        data.extend_from_slice(self.ab.data());
        Tensor::from_vec(&[3, self.height(), self.width()], data).expect("lab stack")
    }

    pub fn cast<U: Scalar>(&self) -> LabFrame<U> {
        LabFrame { l: self.l.cast(), ab: self.ab.cast() }
    }
}

fn f_lab(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_lab_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn decode_srgb(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn encode_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// One sRGB pixel to CIELAB `(L, a, b)` with `L ∈ [0,100]`.
pub fn srgb_to_cielab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(decode_srgb);
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let v = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = f_lab(v / WHITE[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// One CIELAB pixel to sRGB, clamped to `[0,1]`.
pub fn cielab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz = [0, 1, 2].map(|i| WHITE[i] * f_lab_inv(f[i]));
    XYZ_TO_RGB.map(|row| {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        encode_srgb(lin).clamp(0.0, 1.0)
    })
}

pub fn rgb_to_lab<T: Scalar>(rgb: &Tensor<T>) -> Result<LabFrame<T>> {
    ensure_shape(rgb.rank() == 3 && rgb.dim(0) == 3, || format!("expected 3×H×W RGB, got {:?}", rgb.shape()))?;
    if !rgb.all_finite() {
        return Err(Error::Input("RGB image contains non-finite values".into()));
    }
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let n = h * w;
    let d = rgb.data();
    let mut l = Vec::with_capacity(n);
    let mut ab = vec![T::zero(); 2 * n];
    for p in 0..n {
        let px = [d[p], d[n + p], d[2 * n + p]].map(|c| c.as_f64().clamp(0.0, 1.0));
        let [cl, ca, cb] = srgb_to_cielab(px);
        l.push(T::of((cl / 50.0 - 1.0).clamp(-1.0, 1.0)));
        ab[p] = T::of((ca / AB_SCALE).clamp(-1.0, 1.0));
        ab[n + p] = T::of((cb / AB_SCALE).clamp(-1.0, 1.0));
    }
    Ok(LabFrame { l: Tensor::from_vec(&[h, w], l)?, ab: Tensor::from_vec(&[2, h, w], ab)? })
}

pub fn lab_to_rgb<T: Scalar>(frame: &LabFrame<T>) -> Tensor<T> {
    let (h, w) = (frame.height(), frame.width());
    let n = h * w;
    let (l, ab) = (frame.l.data(), frame.ab.data());
    let mut out = vec![T::zero(); 3 * n];
    for p in 0..n {
        let lab = [(l[p].as_f64() + 1.0) * 50.0, ab[p].as_f64() * AB_SCALE, ab[n + p].as_f64() * AB_SCALE];
        let rgb = cielab_to_srgb(lab);
        for c in 0..3 {
            out[c * n + p] = T::of(rgb[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], out).expect("rgb planes")
}

pub fn grayscale_of<T: Scalar>(frame: &LabFrame<T>) -> LabFrame<T> {
    LabFrame { l: frame.l.clone(), ab: Tensor::zeros(frame.ab.shape()) }
}

fn g_f_inv<T: Scalar>(t: T) -> T {
    T::of(f_lab_inv(t.as_f64()))
}

fn g_f_inv_d<T: Scalar>(t: T) -> T {
    let t = t.as_f64();
    T::of(if t > DELTA { 3.0 * t * t } else { 3.0 * DELTA * DELTA })
}

fn g_encode<T: Scalar>(c: T) -> T {
    T::of(encode_srgb(c.as_f64()))
}

fn g_encode_d<T: Scalar>(c: T) -> T {
    let c = c.as_f64();
    T::of(if c <= 0.0031308 { 12.92 } else { 1.055 / 2.4 * c.powf(1.0 / 2.4 - 1.0) })
}

fn g_clamp<T: Scalar>(c: T) -> T {
    c.max(T::zero()).min(T::one())
}

fn g_clamp_d<T: Scalar>(c: T) -> T {
    if c < T::zero() || c > T::one() {
        T::zero()
    } else {
        T::one()
    }
}

/// Differentiable `lab_to_rgb` on batches: `l: B×1×H×W`, `ab: B×2×H×W` → `B×3×H×W`.
pub fn lab_to_rgb_graph<T: Scalar>(g: &Graph<'_, T>, l: Var, ab: Var) -> Var {
    let fy = g.add_scalar(g.scale(l, T::of(50.0 / 116.0)), T::of(66.0 / 116.0));
    let a = g.slice(ab, 1, 0, 1);
    let b = g.slice(ab, 1, 1, 1);
    let fx = g.add(fy, g.scale(a, T::of(AB_SCALE / 500.0)));
    let fz = g.sub(fy, g.scale(b, T::of(AB_SCALE / 200.0)));
    let xyz: Vec<Var> = [fx, fy, fz]
        .iter()
        .zip(WHITE)
        .map(|(&f, w)| g.scale(g.map(f, g_f_inv::<T>, g_f_inv_d::<T>), T::of(w)))
        .collect();
    let planes: Vec<Var> = XYZ_TO_RGB
        .iter()
        .map(|row| {
            let terms: Vec<Var> = (0..3).map(|i| g.scale(xyz[i], T::of(row[i]))).collect();
            let lin = g.add_n(&terms);
            let enc = g.map(lin, g_encode::<T>, g_encode_d::<T>);
            g.map(enc, g_clamp::<T>, g_clamp_d::<T>)
        })
        .collect();
    g.concat(&planes, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solid(rgb: [f64; 3]) -> Tensor<f64> {
        Tensor::from_fn(&[3, 1, 1], |i| rgb[i])
    }

    #[test]
    fn white_and_black_poles() {
        let w = rgb_to_lab(&solid([1.0; 3])).unwrap();
        assert!((w.l.data()[0] - 1.0).abs() < 1e-6);
        assert!(w.ab.max_abs() < 1e-4);
        let b = rgb_to_lab(&solid([0.0; 3])).unwrap();
        assert!((b.l.data()[0] + 1.0).abs() < 1e-9);
        assert!(b.ab.max_abs() < 1e-9);
    }

    #[test]
    fn inverse_poles() {
        let f = LabFrame::<f64>::new(Tensor::full(&[1, 1], 1.0), Tensor::zeros(&[2, 1, 1])).unwrap();
        assert!(lab_to_rgb(&f).data().iter().all(|&c| (c - 1.0).abs() < 1.0 / 255.0));
        let f = LabFrame::<f64>::new(Tensor::full(&[1, 1], -1.0), Tensor::zeros(&[2, 1, 1])).unwrap();
        assert!(lab_to_rgb(&f).data().iter().all(|&c| c.abs() < 1.0 / 255.0));
    }

    #[test]
    fn roundtrip_grid() {
        let steps = 18;
        let n = steps * steps * steps;
        let img = Tensor::<f64>::from_fn(&[3, 1, n], |i| {
            let (c, p) = (i / n, i % n);
            let idx = [p / (steps * steps), (p / steps) % steps, p % steps][c];
            idx as f64 / (steps - 1) as f64
        });
        let back = lab_to_rgb(&rgb_to_lab(&img).unwrap());
        let err = back.zip_map(&img, |a, b| (a - b).abs()).max_abs();
        assert!(err < 1.0 / 255.0, "max roundtrip error {err}");
    }

    #[test]
    fn grayscale_zeroes_chroma_and_keeps_l() {
        let img = Tensor::<f64>::from_fn(&[3, 2, 2], |i| (i as f64 * 0.37).fract());
        let f = rgb_to_lab(&img).unwrap();
        let g = grayscale_of(&f);
        assert_eq!(g.l, f.l);
        assert_eq!(g.ab.max_abs(), 0.0);
        assert_eq!(grayscale_of(&g), g);
    }

    #[test]
    fn non_finite_rejected() {
        let img = Tensor::<f64>::from_fn(&[3, 1, 1], |i| if i == 1 { f64::NAN } else { 0.5 });
        assert!(rgb_to_lab(&img).is_err());
    }

    #[test]
    fn graph_conversion_matches_pointwise() {
        let img = Tensor::<f64>::from_fn(&[3, 3, 4], |i| ((i * 7) as f64 * 0.131).fract());
        let lab = rgb_to_lab(&img).unwrap();
        let g = Graph::new();
        let l = g.constant(lab.l.clone().reshape(&[1, 1, 3, 4]).unwrap());
        let ab = g.constant(lab.ab.clone().reshape(&[1, 2, 3, 4]).unwrap());
        let rgb = g.value(lab_to_rgb_graph(&g, l, ab));
        let direct = lab_to_rgb(&lab);
        let err = rgb.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    proptest! {
        #[test]
        fn gray_rgb_has_no_chroma(v in 0.0f64..=1.0) {
            let f = rgb_to_lab(&solid([v; 3])).unwrap();
            prop_assert!(f.ab.max_abs() < 0.01);
        }

        #[test]
        fn roundtrip_random(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let img = solid([r, g, b]);
            let f = rgb_to_lab(&img).unwrap();
            prop_assert!(f.l.max_abs() <= 1.0 && f.ab.max_abs() <= 1.0);
            let back = lab_to_rgb(&f);
            for c in 0..3 {
                prop_assert!((back.data()[c] - img.data()[c]).abs() < 1.0 / 255.0);
            }
        }
    }
}
