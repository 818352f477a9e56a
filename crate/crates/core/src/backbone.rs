//! Strided convolutional trunk producing low- and high-level feature maps
//! at quarter resolution.

use std::path::{Path, PathBuf};

use chromalink_autograd::nn::Conv2d;
use chromalink_autograd::{Graph, ParamBuilder, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::colorspace::LabFrame;
use crate::config::PipelineConfig;
use crate::error::{ensure_shape, Error, Result};

pub const SCOPE: &str = "backbone";

/// Per-image features: `r_low: B×C_low×h×w`, `r_high: B×C_high×h×w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    pub r_low: Tensor<T>,
    pub r_high: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    low1: Conv2d,
    low2: Conv2d,
    high1: Conv2d,
    high2: Conv2d,
    pub c_low: usize,
    pub c_high: usize,
    /// Where pretrained weights were loaded from, if anywhere.
    pub pretrained_from: Option<PathBuf>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &PipelineConfig) -> Result<Self> {
        let mode = cfg.pad_mode()?;
        let (cl, ch, s) = (cfg.c_low, cfg.c_high, cfg.stem_channels);
        Ok(pb.in_group("backbone", |pb| {
            pb.scope(SCOPE, |pb| Backbone {
                stem: Conv2d::new(pb, "stem", 3, s, 3, 1).with_mode(mode),
                low1: Conv2d::new(pb, "low1", s, cl / 2, 3, 2).with_mode(mode),
                low2: Conv2d::new(pb, "low2", cl / 2, cl - cl / 2, 3, 2).with_mode(mode),
                high1: Conv2d::new(pb, "high1", cl - cl / 2, ch / 2, 3, 1).with_mode(mode),
                high2: Conv2d::new(pb, "high2", ch / 2, ch - ch / 2, 3, 2).with_mode(mode),
                c_low: cl,
                c_high: ch,
                pretrained_from: None,
            })
        }))
    }

    /// `l: B×1×H×W` → `(r_low, r_high)` at `⌈H/4⌉×⌈W/4⌉`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, l: Var) -> Result<(Var, Var)> {
        let s = g.shape(l);
        ensure_shape(s.len() == 4 && s[1] == 1, || format!("backbone expects B×1×H×W, got {s:?}"))?;
        let (h, w) = (s[2].div_ceil(4), s[3].div_ceil(4));
        let x = g.concat(&[l, l, l], 1);
        let x = g.relu(self.stem.forward(g, x));
        let t1 = g.relu(self.low1.forward(g, x));
        let t2 = g.relu(self.low2.forward(g, t1));
        let t3 = g.relu(self.high1.forward(g, t2));
        let t4 = g.relu(self.high2.forward(g, t3));
        let r_low = g.concat(&[g.resize(t1, h, w), t2], 1);
        let r_high = g.concat(&[t3, g.resize(t4, h, w)], 1);
        Ok((r_low, r_high))
    }

    pub fn extract_features<T: Scalar>(&self, store: &ParamStore<T>, images: &[LabFrame<T>]) -> Result<FeatureSet<T>> {
        let first = images.first().ok_or_else(|| Error::Input("no images".into()))?;
        let (h, w) = (first.height(), first.width());
        for (i, im) in images.iter().enumerate() {
            ensure_shape((im.height(), im.width()) == (h, w), || {
                format!("image {i} is {}×{}, expected {h}×{w}", im.height(), im.width())
            })?;
        }
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            data.extend_from_slice(im.l.data());
        }
        let g = Graph::with_params(store);
        let l = g.constant(Tensor::from_vec(&[images.len(), 1, h, w], data)?);
        let (lo, hi) = self.forward(&g, l)?;
        Ok(FeatureSet { r_low: (*g.value(lo)).clone(), r_high: (*g.value(hi)).clone() })
    }

    pub fn save<T: Scalar>(&self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        Checkpoint::from_store(store, is_backbone).save(path)
    }

    /// Replaces backbone parameters from a checkpoint container, rejecting
    /// the whole load if any tensor is missing or mis-shaped.
    pub fn load_pretrained<T: Scalar>(&mut self, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        let ck = Checkpoint::<T>::load(path)?;
        ck.restore_into(store, is_backbone)?;
        self.pretrained_from = Some(path.to_path_buf());
        Ok(())
    }
}

pub fn is_backbone(name: &str) -> bool {
    name.starts_with("backbone.")
}
