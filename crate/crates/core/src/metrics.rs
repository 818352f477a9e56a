//! PSNR, colorfulness and warp error.

use std::path::Path;
use std::process::Command;

use chromalink_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::flowlab::{FlowField, OcclusionMask};
use crate::losses::warp_by_flow;

pub const PSNR_CAP: f64 = 100.0;
pub const WE_SCALE: f64 = 100.0;

pub fn psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    ensure_shape(pred.shape() == gt.shape(), || format!("psnr: {:?} vs {:?}", pred.shape(), gt.shape()))?;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / pred.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Hasler–Süsstrunk colorfulness of a planar RGB image in `[0,1]`, on the
/// 0–255 scale.
pub fn colorfulness<T: Scalar>(rgb: &Tensor<T>) -> Result<f64> {
    ensure_shape(rgb.rank() == 3 && rgb.dim(0) == 3, || format!("expected 3×H×W, got {:?}", rgb.shape()))?;
    let n = rgb.dim(1) * rgb.dim(2);
    let d = rgb.data();
    let (mut s_rg, mut s_yb, mut q_rg, mut q_yb) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..n {
        let (r, g, b) = (d[p].as_f64() * 255.0, d[n + p].as_f64() * 255.0, d[2 * n + p].as_f64() * 255.0);
        let rg = r - g;
        let yb = 0.5 * (r + g) - b;
        s_rg += rg;
        s_yb += yb;
        q_rg += rg * rg;
        q_yb += yb * yb;
    }
    let nf = n as f64;
    let (m_rg, m_yb) = (s_rg / nf, s_yb / nf);
    let var_rg = (q_rg / nf - m_rg * m_rg).max(0.0);
    let var_yb = (q_yb / nf - m_yb * m_yb).max(0.0);
    Ok((var_rg + var_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt())
}

/// `Σ_{c,p} mask(p)·|a(c,p) − b(c,p)|` and the number of masked pixels.
/// Shared by the warp error and the temporal loss.
pub fn masked_abs_diff_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &OcclusionMask) -> Result<(f64, usize)> {
    ensure_shape(a.shape() == b.shape() && a.rank() == 3, || {
        format!("masked diff: {:?} vs {:?}", a.shape(), b.shape())
    })?;
    let n = a.dim(1) * a.dim(2);
    ensure_shape(mask.data.len() == n, || format!("mask {}×{} vs frame {:?}", mask.height, mask.width, a.shape()))?;
    let mut sum = 0.0;
    for c in 0..a.dim(0) {
        for p in 0..n {
            if mask.data[p] != 0 {
                sum += (a.data()[c * n + p].as_f64() - b.data()[c * n + p].as_f64()).abs();
            }
        }
    }
    Ok((sum, mask.count()))
}

/// Per-pair warp error: masked mean L1 per channel and masked pixel, ×100.
pub fn warp_error_pairs<T: Scalar>(frames: &[Tensor<T>], flows: &[FlowField], masks: &[OcclusionMask]) -> Result<Vec<f64>> {
    let pairs = frames.len().saturating_sub(1);
    if flows.len() != pairs || masks.len() != pairs {
        return Err(Error::Input(format!(
            "warp error needs {pairs} flows and masks for {} frames, got {} and {}",
            frames.len(),
            flows.len(),
            masks.len()
        )));
    }
    (1..frames.len())
        .map(|t| {
            let warped = warp_by_flow(&frames[t - 1], &flows[t - 1])?;
            let (sum, count) = masked_abs_diff_sum(&warped, &frames[t], &masks[t - 1])?;
            Ok(if count == 0 { 0.0 } else { WE_SCALE * sum / (frames[t].dim(0) * count) as f64 })
        })
        .collect()
}

pub fn warp_error<T: Scalar>(frames: &[Tensor<T>], flows: &[FlowField], masks: &[OcclusionMask]) -> Result<f64> {
    let pairs = warp_error_pairs(frames, flows, masks)?;
    Ok(mean(&pairs))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub mean: f64,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(values: Vec<f64>) -> Self {
        MetricSeries { mean: mean(&values), values }
    }
}

/// A metric computed by a user-supplied program invoked as
/// `program args… PRED_DIR GT_DIR`, which must print one number on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetric {
    pub name: String,
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalMetric {
    pub fn run(&self, pred_dir: &Path, gt_dir: &Path) -> Result<f64> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(pred_dir)
            .arg(gt_dir)
            .output()
            .map_err(|e| Error::External(format!("{}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::External(format!("{} exited with {}", self.program, out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|_| Error::External(format!("{}: expected a number, got {:?}", self.name, text.trim())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowlab::FlowDirection;

    fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        10.0 * (a.len() as f64 / s).log10()
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::<f64>::from_fn(&[3, 4, 4], |i| (i as f64 * 0.13).fract() * 0.8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Tensor::<f64>::from_fn(&[3, 4, 4], |i| (i as f64 * 0.71).fract());
        assert!((psnr(&a, &c).unwrap() - psnr_oracle(a.data(), c.data())).abs() < 1e-6);
        assert!(psnr(&a, &Tensor::zeros(&[3, 2, 2])).is_err());
    }

    #[test]
    fn colorfulness_cases() {
        let gray = Tensor::<f64>::from_fn(&[3, 3, 3], |i| ((i % 9) as f64) / 9.0);
        assert!(colorfulness(&gray).unwrap().abs() < 1e-9);
        let red = Tensor::<f64>::from_fn(&[3, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        let expected = 0.3 * (255.0f64.powi(2) + 127.5f64.powi(2)).sqrt();
        assert!((colorfulness(&red).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 85.55).abs() < 0.05);
    }

    #[test]
    fn colorfulness_half_red_half_green() {
        // Left column pure red, right column pure green.
        let img = Tensor::<f64>::from_fn(&[3, 2, 2], |i| {
            let (c, x) = (i / 4, i % 2);
            f64::from((c == 0 && x == 0) || (c == 1 && x == 1))
        });
        let px = [(255.0, 0.0, 0.0), (0.0, 255.0, 0.0)];
        let rg: Vec<f64> = px.iter().map(|p| p.0 - p.1).collect();
        let yb: Vec<f64> = px.iter().map(|p| 0.5 * (p.0 + p.1) - p.2).collect();
        let mu = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mu(v);
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        let oracle = (var(&rg) + var(&yb)).sqrt() + 0.3 * (mu(&rg).powi(2) + mu(&yb).powi(2)).sqrt();
        assert!((colorfulness(&img).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn static_video_has_zero_warp_error() {
        let f = Tensor::<f64>::from_fn(&[3, 5, 6], |i| (i as f64 * 0.3).sin().abs());
        let frames = vec![f.clone(), f.clone(), f];
        let flows = vec![FlowField::zeros(5, 6, FlowDirection::Backward); 2];
        let masks = vec![OcclusionMask::full(5, 6); 2];
        assert_eq!(warp_error(&frames, &flows, &masks).unwrap(), 0.0);
        let empty = vec![OcclusionMask::empty(5, 6); 2];
        let noisy = vec![Tensor::<f64>::zeros(&[3, 5, 6]), Tensor::ones(&[3, 5, 6]), Tensor::zeros(&[3, 5, 6])];
        assert_eq!(warp_error(&noisy, &flows, &empty).unwrap(), 0.0);
        assert!(warp_error(&noisy, &flows[..1], &empty).is_err());
    }
}
