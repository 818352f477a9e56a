use std::collections::BTreeMap;
use std::path::Path;

use chromalink_autograd::{Graph, ParamBuilder, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::colorizer::{Colorizer, ColorizerInput};
use crate::colorspace::LabFrame;
use crate::config::PipelineConfig;
use crate::correspondence::{CorrespondenceFlags, CorrespondenceNet, CorrespondenceOut};
use crate::error::{ensure_shape, Error, Result};
use crate::linkage::{self, LinkageNet, LinkageState};
use crate::losses::{FeatureExtractor, PatchDiscriminator};

/// Spatial granularity every block must satisfy (three stride-2 encoder stages).
pub const SPATIAL_MULTIPLE: usize = 8;

/// All networks of the method with their shared parameter store.
#[derive(Debug, Clone)]
pub struct ColorizationModel<T> {
    pub config: PipelineConfig,
    pub store: ParamStore<T>,
    pub corr: CorrespondenceNet,
    pub linkage: LinkageNet,
    pub colorizer: Colorizer,
    pub disc: PatchDiscriminator,
    pub perceptual: FeatureExtractor,
}

/// Graph outputs of one block.
pub struct BlockForward {
    /// `N×2×H×W` predicted chrominance.
    pub ab: Var,
    pub corr: CorrespondenceOut,
}

impl<T: Scalar> ColorizationModel<T> {
    /// Builds freshly initialized networks; `config.seed` fixes the init.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, "others");
        let corr = CorrespondenceNet::new(&mut pb, &config)?;
        let linkage = LinkageNet::new(&mut pb, config.d_model, config.linkage_hidden);
        let colorizer = Colorizer::new(&mut pb, &config);
        let disc = PatchDiscriminator::new(&mut pb, config.disc_channels);
        let perceptual = FeatureExtractor::new(&mut pb, config.perc_channels);
        Ok(ColorizationModel { config, store, corr, linkage, colorizer, disc, perceptual })
    }

    pub fn flags(&self) -> CorrespondenceFlags {
        CorrespondenceFlags { no_transformer: self.config.no_transformer_branch, single_head: self.config.single_head }
    }

    /// Replaces the inference-time ablation switches without touching weights.
    pub fn set_ablation(&mut self, no_transformer_branch: bool, single_head: bool, no_linkage: bool) {
        self.config.no_transformer_branch = no_transformer_branch;
        self.config.single_head = single_head;
        self.config.no_linkage = no_linkage;
    }

    /// One block through query, correspondence and colorization. `info` is
    /// ignored when linkage is disabled.
    pub fn forward_block(&self, g: &Graph<'_, T>, block_l: Var, ref_lab: Var, info: Option<Var>) -> Result<BlockForward> {
        let info = if self.config.uses_linkage() { info } else { None };
        let corr = self.corr.forward(g, block_l, ref_lab, self.flags(), |r| self.linkage.query(g, r, info))?;
        let ab = self.colorizer.forward(
            g,
            &ColorizerInput {
                w1: corr.w1,
                s1: corr.s1,
                w2: corr.w2,
                s2: corr.s2,
                block_l,
                ref_lab,
                ho: corr.ho,
            },
        )?;
        Ok(BlockForward { ab, corr })
    }

    /// Next linkage information in-graph, or `None` when linkage is off.
    pub fn store_linkage(&self, g: &Graph<'_, T>, info: Option<Var>, out: &BlockForward) -> Result<Option<Var>> {
        match (self.config.uses_linkage(), out.corr.ho) {
            (true, Some(ho)) => Ok(Some(linkage::store(g, info, ho)?)),
            _ => Ok(None),
        }
    }

    pub fn to_checkpoint(&self, linkage: Option<&LinkageState<T>>, meta: BTreeMap<String, String>) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_store(&self.store, |_| true);
        ck.config = Some(self.config.clone());
        ck.linkage = linkage.cloned();
        ck.meta = meta;
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None, BTreeMap::new()).save(path)
    }

    /// Rebuilds the model from a checkpoint's config snapshot and weights.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let config = ck
            .config
            .clone()
            .ok_or_else(|| Error::Checkpoint("no config snapshot".into()))?;
        let mut model = Self::new(config)?;
        ck.restore_into(&mut model.store, |_| true)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Stacks luminance planes into `N×1×H×W`.
pub fn stack_l<T: Scalar>(frames: &[LabFrame<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| Error::Input("empty frame list".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for (i, f) in frames.iter().enumerate() {
        ensure_shape((f.height(), f.width()) == (h, w), || {
            format!("frame {i} is {}×{}, expected {w}×{h}", f.width(), f.height())
        })?;
        data.extend_from_slice(f.l.data());
    }
    Ok(Tensor::from_vec(&[frames.len(), 1, h, w], data)?)
}

/// Stacks chrominance into `N×2×H×W`.
pub fn stack_ab<T: Scalar>(frames: &[LabFrame<T>]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = frames.iter().map(|f| f.ab.clone()).collect();
    Ok(Tensor::stack(&items)?)
}

/// Replicate-pads `…×H×W` to `oh×ow`.
pub fn pad_replicate<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let mut shape = s.to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let d = x.data();
    Tensor::from_fn(&shape, |i| {
        let (p, rem) = (i / (oh * ow), i % (oh * ow));
        let (y, xx) = ((rem / ow).min(h - 1), (rem % ow).min(w - 1));
        d[p * h * w + y * w + xx]
    })
}

/// Crops `…×H×W` to its top-left `oh×ow`.
pub fn crop<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let mut shape = s.to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let d = x.data();
    Tensor::from_fn(&shape, |i| {
        let (p, rem) = (i / (oh * ow), i % (oh * ow));
        d[p * h * w + (rem / ow) * w + rem % ow]
    })
}

pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE, w.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE)
}
