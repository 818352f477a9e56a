//! Training objectives and the flow-based warping they rely on.

mod adversarial;
mod perceptual;

pub use adversarial::{adversarial_loss, lsgan_discriminator_loss, lsgan_generator_loss, PatchDiscriminator};
pub use perceptual::{perceptual_loss, FeatureExtractor};

use std::rc::Rc;

use chromalink_autograd::kernels::sample_planes;
use chromalink_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::flowlab::{FlowField, OcclusionMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub perc: f64,
    pub temp: f64,
    pub adv: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 0.5, perc: 0.05, temp: 3.0, adv: 0.2, smooth: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be a finite value ≥ 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("l1", self.l1), ("perceptual", self.perc), ("temporal", self.temp), ("adversarial", self.adv), ("smooth", self.smooth)]
    }
}

/// Per-component loss values; absent components contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub l1: Option<Var>,
    pub perc: Option<Var>,
    pub temp: Option<Var>,
    pub adv: Option<Var>,
    pub smooth: Option<Var>,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, Option<Var>); 5] {
        [("l1", self.l1), ("perceptual", self.perc), ("temporal", self.temp), ("adversarial", self.adv), ("smooth", self.smooth)]
    }
}

fn same_shape<T: Scalar>(g: &Graph<'_, T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    ensure_shape(sa == sb, || format!("{what}: {sa:?} vs {sb:?}"))
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(g: &Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, pred, gt, "l1 loss")?;
    Ok(g.mean(g.abs(g.sub(pred, gt))))
}

/// Backward bilinear warp of a `C×H×W` frame: `out(p) = frame(p − D(p))`
/// with `D` the flow's target-grid displacement; samples clamp at the border.
pub fn warp_by_flow<T: Scalar>(frame: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    ensure_shape(frame.rank() == 3 && frame.shape()[1..] == flow.uv.shape()[1..], || {
        format!("frame {:?} vs flow {:?}", frame.shape(), flow.uv.shape())
    })?;
    let (c, h, w) = (frame.dim(0), frame.dim(1), frame.dim(2));
    let mut out = vec![T::zero(); frame.numel()];
    sample_planes(frame.data(), c, h, w, &flow.warp_samples(), &mut out);
    Ok(Tensor::from_vec(frame.shape(), out)?)
}

/// Differentiable [`warp_by_flow`] for any tensor whose last two axes match
/// the flow grid.
pub fn warp_by_flow_graph<T: Scalar>(g: &Graph<'_, T>, x: Var, flow: &FlowField) -> Result<Var> {
    let s = g.shape(x);
    ensure_shape(s.len() >= 2 && s[s.len() - 2..] == flow.uv.shape()[1..], || {
        format!("frame {s:?} vs flow {:?}", flow.uv.shape())
    })?;
    Ok(g.warp(x, Rc::new(flow.warp_samples())))
}

fn mask_planes<T: Scalar>(mask: &OcclusionMask, channels: usize) -> Tensor<T> {
    let n = mask.height * mask.width;
    Tensor::from_fn(&[channels, mask.height, mask.width], |i| {
        if mask.data[i % n] != 0 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `mean |mask ⊙ (warp(prev) − cur)|` over `C·H·W`; inputs are `C×H×W`.
pub fn temporal_loss<T: Scalar>(g: &Graph<'_, T>, prev: Var, cur: Var, flow: &FlowField, mask: &OcclusionMask) -> Result<Var> {
    same_shape(g, prev, cur, "temporal loss")?;
    let s = g.shape(cur);
    ensure_shape(s.len() == 3 && s[1..] == [mask.height, mask.width], || {
        format!("temporal loss expects C×H×W matching mask {}×{}, got {s:?}", mask.height, mask.width)
    })?;
    let warped = warp_by_flow_graph(g, prev, flow)?;
    let m = g.constant(mask_planes(mask, s[0]));
    Ok(g.mean(g.abs(g.mul(m, g.sub(warped, cur)))))
}

/// Luminance-guided total variation on `B×2×H×W` chrominance with
/// `B×1×H×W` luminance: `mean(|∂ab|·exp(−|∂l|/σ))` summed over both axes.
pub fn smooth_loss<T: Scalar>(g: &Graph<'_, T>, ab: Var, l: Var, sigma: f64) -> Result<Var> {
    let (sa, sl) = (g.shape(ab), g.shape(l));
    ensure_shape(sa.len() == 4 && sa[1] == 2 && sl == [sa[0], 1, sa[2], sa[3]], || {
        format!("smooth loss: ab {sa:?} vs l {sl:?}")
    })?;
    let mut terms = Vec::new();
    for axis in [3, 2] {
        let n = sa[axis];
        if n < 2 {
            continue;
        }
        let diff = |x: Var| g.sub(g.slice(x, axis, 1, n - 1), g.slice(x, axis, 0, n - 1));
        let wgt = g.exp(g.scale(g.abs(diff(l)), T::of(-1.0 / sigma)));
        let wgt = g.concat(&[wgt, wgt], 1);
        terms.push(g.mean(g.mul(g.abs(diff(ab)), wgt)));
    }
    Ok(match terms.len() {
        0 => g.constant(Tensor::scalar(T::zero())),
        1 => terms[0],
        _ => g.add(terms[0], terms[1]),
    })
}

/// Weighted sum of the present components. A non-finite component is
/// reported by name (with `step` 0; callers fill in the step).
pub fn total_loss<T: Scalar>(g: &Graph<'_, T>, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut parts = Vec::new();
    for ((name, term), (_, w)) in terms.named().into_iter().zip(weights.named()) {
        let Some(v) = term else { continue };
        let val = g.scalar_value(v);
        if !val.is_finite() {
            return Err(Error::NonFinite { component: name, step: 0 });
        }
        if w != 0.0 {
            parts.push(g.scale(v, T::of(w)));
        }
    }
    Ok(if parts.is_empty() { g.constant(Tensor::scalar(T::zero())) } else { g.add_n(&parts) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowlab::{synth_flow_translate, FlowDirection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn l1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rt(&mut rng, &[2, 3, 4]);
        let g = Graph::new();
        let va = g.constant(a.clone());
        assert_eq!(g.scalar_value(l1_loss(&g, va, va).unwrap()), 0.0);
        let shifted = g.constant(a.map(|v| v + 0.5));
        assert!((g.scalar_value(l1_loss(&g, shifted, va).unwrap()) - 0.5).abs() < 1e-12);
        let b = rt(&mut rng, &[2, 3, 4]);
        let mut oracle = 0.0;
        for i in 0..a.numel() {
            oracle += (a.data()[i] - b.data()[i]).abs();
        }
        oracle /= a.numel() as f64;
        let got = g.scalar_value(l1_loss(&g, va, g.constant(b)).unwrap());
        assert!((got - oracle).abs() < 1e-7);
        assert!(l1_loss(&g, va, g.constant(Tensor::zeros(&[3, 2, 4]))).is_err());
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rt(&mut rng, &[2, 5, 7]);
        let out = warp_by_flow(&f, &FlowField::zeros(5, 7, FlowDirection::Forward)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn integer_shift_of_a_ramp() {
        let (h, w) = (6, 10);
        let ramp = Tensor::<f64>::from_fn(&[1, h, w], |i| (i % w) as f64);
        let (fwd, bwd) = synth_flow_translate(h, w, 2.0, 0.0).unwrap();
        for flow in [fwd, bwd] {
            let out = warp_by_flow(&ramp, &flow).unwrap();
            for y in 0..h {
                for x in 2..w {
                    assert_eq!(out.data()[y * w + x], (x - 2) as f64);
                }
                assert_eq!(out.data()[y * w], 0.0);
            }
        }
    }

    #[test]
    fn half_pixel_shift_averages_a_step_edge() {
        let w = 8;
        let step = Tensor::<f64>::from_fn(&[1, 1, w], |x| if x < 4 { 0.0 } else { 1.0 });
        let flow = FlowField::constant(1, w, 0.5, 0.0, FlowDirection::Backward);
        // Backward flow +0.5 reads frame(x + 0.5).
        let out = warp_by_flow(&step, &flow).unwrap();
        assert_eq!(out.data()[3], 0.5);
        assert_eq!(out.data()[2], 0.0);
        assert_eq!(out.data()[4], 1.0);
    }

    #[test]
    fn temporal_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rt(&mut rng, &[2, 6, 6]);
        let b = rt(&mut rng, &[2, 6, 6]);
        let g = Graph::new();
        let zero = FlowField::zeros(6, 6, FlowDirection::Backward);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let same = temporal_loss(&g, va, va, &zero, &OcclusionMask::full(6, 6)).unwrap();
        assert_eq!(g.scalar_value(same), 0.0);
        let none = temporal_loss(&g, va, vb, &zero, &OcclusionMask::empty(6, 6)).unwrap();
        assert_eq!(g.scalar_value(none), 0.0);
        let half = OcclusionMask::from_fn(6, 6, |x, _| x < 3);
        let base = g.scalar_value(temporal_loss(&g, va, vb, &zero, &half).unwrap());
        let b2 = Tensor::from_fn(&[2, 6, 6], |i| if i % 6 < 3 { b.data()[i] } else { 9.0 });
        let outside = g.scalar_value(temporal_loss(&g, va, g.constant(b2), &zero, &half).unwrap());
        assert_eq!(base, outside);
    }

    fn smooth_oracle(ab: &Tensor<f64>, l: &Tensor<f64>, sigma: f64) -> f64 {
        let (b, h, w) = (ab.dim(0), ab.dim(2), ab.dim(3));
        let at = |t: &Tensor<f64>, c: usize, i: usize, y: usize, x: usize| {
            t.data()[((i * t.dim(1) + c) * h + y) * w + x]
        };
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..b {
            for c in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        if x + 1 < w {
                            let wt = (-(at(l, 0, i, y, x + 1) - at(l, 0, i, y, x)).abs() / sigma).exp();
                            sx += (at(ab, c, i, y, x + 1) - at(ab, c, i, y, x)).abs() * wt;
                        }
                        if y + 1 < h {
                            let wt = (-(at(l, 0, i, y + 1, x) - at(l, 0, i, y, x)).abs() / sigma).exp();
                            sy += (at(ab, c, i, y + 1, x) - at(ab, c, i, y, x)).abs() * wt;
                        }
                    }
                }
            }
        }
        sx / (b * 2 * h * (w - 1)) as f64 + sy / (b * 2 * (h - 1) * w) as f64
    }

    #[test]
    fn smooth_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let l = rt(&mut rng, &[2, 1, 5, 6]);
        let flat = g.constant(Tensor::full(&[2, 2, 5, 6], 0.3));
        assert_eq!(g.scalar_value(smooth_loss(&g, flat, g.constant(l.clone()), 0.1).unwrap()), 0.0);
        let ab = rt(&mut rng, &[2, 2, 5, 6]);
        let got = g.scalar_value(smooth_loss(&g, g.constant(ab.clone()), g.constant(l.clone()), 0.1).unwrap());
        assert!((got - smooth_oracle(&ab, &l, 0.1)).abs() < 1e-6);

        let edge = Tensor::<f64>::from_fn(&[1, 2, 4, 8], |i| if i % 8 < 4 { -0.5 } else { 0.5 });
        let l_edge = Tensor::<f64>::from_fn(&[1, 1, 4, 8], |i| if i % 8 < 4 { -1.0 } else { 1.0 });
        let l_flat = Tensor::<f64>::zeros(&[1, 1, 4, 8]);
        let e = g.constant(edge);
        let on_edge = g.scalar_value(smooth_loss(&g, e, g.constant(l_edge), 0.1).unwrap());
        let on_flat = g.scalar_value(smooth_loss(&g, e, g.constant(l_flat), 0.1).unwrap());
        assert!(on_edge < on_flat);
    }

    #[test]
    fn total_loss_weights() {
        let g = Graph::<f64>::new();
        let one = || Some(g.constant(Tensor::scalar(1.0)));
        let zero = || Some(g.constant(Tensor::scalar(0.0)));
        let w = LossWeights::default();
        let all_one = LossTerms { l1: one(), perc: one(), temp: one(), adv: one(), smooth: one() };
        assert!((g.scalar_value(total_loss(&g, &all_one, &w).unwrap()) - 7.75).abs() < 1e-12);
        let all_zero = LossTerms { l1: zero(), perc: zero(), temp: zero(), adv: zero(), smooth: zero() };
        assert_eq!(g.scalar_value(total_loss(&g, &all_zero, &w).unwrap()), 0.0);
        let bad = LossTerms { temp: Some(g.constant(Tensor::scalar(f64::NAN))), ..all_one };
        match total_loss(&g, &bad, &w) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "temporal"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn total_gradient_is_weighted_component_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rt(&mut rng, &[1, 2, 6, 6]);
        let l = rt(&mut rng, &[1, 1, 6, 6]);
        let gt = rt(&mut rng, &[1, 2, 6, 6]);
        let w = LossWeights::default();
        let grad_of = |pick: Option<usize>| {
            let g = Graph::new();
            let x = g.variable(x0.clone());
            let l1 = l1_loss(&g, x, g.constant(gt.clone())).unwrap();
            let sm = smooth_loss(&g, x, g.constant(l.clone()), 0.1).unwrap();
            let loss = match pick {
                None => total_loss(&g, &LossTerms { l1: Some(l1), smooth: Some(sm), ..Default::default() }, &w).unwrap(),
                Some(0) => l1,
                Some(_) => sm,
            };
            g.backward(loss).wrt(x).unwrap().clone()
        };
        let total = grad_of(None);
        let manual = grad_of(Some(0)).zip_map(&grad_of(Some(1)), |a, b| w.l1 * a + w.smooth * b);
        assert!(total.zip_map(&manual, |a, b| (a - b).abs()).max_abs() < 1e-12);
    }
}
