use chromalink_autograd::nn::Conv2d;
use chromalink_autograd::{Graph, ParamBuilder, Scalar, Var};
use rand::Rng;

use crate::error::{ensure_shape, Result};

/// Fixed random convolutional feature extractor over RGB in `[0, 1]`.
/// Its parameters live in the `frozen` group and are never updated.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub convs: Vec<Conv2d>,
}

impl FeatureExtractor {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, channels: usize) -> Self {
        let c = channels;
        pb.in_group("frozen", |pb| {
            pb.scope("perceptual", |pb| FeatureExtractor {
                convs: vec![
                    Conv2d::new(pb, "c1", 3, c, 3, 1),
                    Conv2d::new(pb, "c2", c, 2 * c, 3, 2),
                    Conv2d::new(pb, "c3", 2 * c, 2 * c, 3, 1),
                    Conv2d::new(pb, "c4", 2 * c, 4 * c, 3, 2),
                ],
            })
        })
    }

    /// Deep feature tap for `B×3×H×W` RGB.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, rgb: Var) -> Result<Var> {
        let s = g.shape(rgb);
        ensure_shape(s.len() == 4 && s[1] == 3, || format!("feature extractor expects B×3×H×W, got {s:?}"))?;
        let mut x = g.add_scalar(g.scale(rgb, T::of(2.0)), -T::one());
        for c in &self.convs {
            x = g.relu(c.forward(g, x));
        }
        Ok(x)
    }
}

/// Mean squared distance between deep features of prediction and target.
pub fn perceptual_loss<T: Scalar>(g: &Graph<'_, T>, ext: &FeatureExtractor, pred_rgb: Var, gt_rgb: Var) -> Result<Var> {
    let (a, b) = (g.shape(pred_rgb), g.shape(gt_rgb));
    ensure_shape(a == b, || format!("perceptual loss: {a:?} vs {b:?}"))?;
    let fp = ext.forward(g, pred_rgb)?;
    let ft = ext.forward(g, g.detach(gt_rgb))?;
    Ok(g.mean(g.square(g.sub(fp, ft))))
}
