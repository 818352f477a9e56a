//! Double-head non-local correspondence against the reference image.

use chromalink_autograd::nn::Conv2d;
use chromalink_autograd::{Graph, ParamBuilder, ParamId, Scalar, Tensor, Var};
use rand::Rng;

use crate::backbone::Backbone;
use crate::config::PipelineConfig;
use crate::ctblock::{CtStack, Fuse};
use crate::error::{ensure_shape, Result};

/// `M = F̂_B · F̂_yᵀ` where `F̂` are rows centered by their set mean and scaled
/// to unit length. Rows with zero norm correlate to 0.
pub fn correlation<T: Scalar>(g: &Graph<'_, T>, f_b: Var, f_y: Var) -> Var {
    let center = |f: Var| g.row_normalize(g.sub_row(f, g.mean_rows(f)));
    g.matmul_nt(center(f_b), center(f_y))
}

/// `W(i) = Σ_j softmax_j(M(i,·)/τ) · y_ab(j)`.
pub fn warp_colors<T: Scalar>(g: &Graph<'_, T>, m: Var, y_ab: Var, tau: f64) -> Var {
    g.matmul(g.softmax_rows(g.scale(m, T::of(1.0 / tau))), y_ab)
}

/// Row-wise maximum of `M` as a column.
pub fn similarity_map<T: Scalar>(g: &Graph<'_, T>, m: Var) -> Var {
    g.max_rows(m)
}

/// One head's outputs in token form: `m: (N·h·w)×(h·w)`, `w: (N·h·w)×2`,
/// `s: (N·h·w)×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationOutputs<T> {
    pub m: Tensor<T>,
    pub w: Tensor<T>,
    pub s: Tensor<T>,
}

/// Eager evaluation of correlation, warping and similarity for one head.
pub fn non_local<T: Scalar>(f_b: &Tensor<T>, f_y: &Tensor<T>, y_ab: &Tensor<T>, tau: f64) -> Result<CorrelationOutputs<T>> {
    ensure_shape(f_b.rank() == 2 && f_y.rank() == 2 && f_b.dim(1) == f_y.dim(1), || {
        format!("head features disagree: {:?} vs {:?}", f_b.shape(), f_y.shape())
    })?;
    ensure_shape(y_ab.shape() == [f_y.dim(0), 2], || {
        format!("reference ab {:?} must be {}×2", y_ab.shape(), f_y.dim(0))
    })?;
    if !(tau > 0.0) {
        return Err(crate::Error::Input(format!("tau must be > 0, got {tau}")));
    }
    let g = Graph::new();
    let m = correlation(&g, g.constant(f_b.clone()), g.constant(f_y.clone()));
    let w = warp_colors(&g, m, g.constant(y_ab.clone()), tau);
    let s = similarity_map(&g, m);
    Ok(CorrelationOutputs { m: (*g.value(m)).clone(), w: (*g.value(w)).clone(), s: (*g.value(s)).clone() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorrespondenceFlags {
    pub no_transformer: bool,
    pub single_head: bool,
}

/// Graph outputs of the correspondence subnet for one block.
pub struct CorrespondenceOut {
    /// `N×2×h×w` warped chrominance per head.
    pub w1: Var,
    pub w2: Var,
    /// `N×1×h×w` similarity per head.
    pub s1: Var,
    pub s2: Var,
    pub m1: Var,
    pub m2: Var,
    /// Final token state, `(N+1)·h·w × d_model`, absent without the
    /// transformer branch.
    pub ho: Option<Var>,
    pub r_tokens: Option<Var>,
    pub layout: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct CorrespondenceNet {
    pub backbone: Backbone,
    pub tokenize: Conv2d,
    pub ct: CtStack,
    pub fuse: Fuse,
    pub head1: Conv2d,
    pub head2: Conv2d,
    pub aug: Conv2d,
    pub alpha: ParamId,
    pub tau: f64,
}

impl CorrespondenceNet {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &PipelineConfig) -> Result<Self> {
        let backbone = Backbone::new(pb, cfg)?;
        Ok(pb.scope("corr", |pb| CorrespondenceNet {
            backbone,
            tokenize: Conv2d::pointwise(pb, "tokenize", cfg.c_high, cfg.d_model),
            ct: CtStack::new(
                pb,
                "ct",
                cfg.ct_blocks,
                cfg.c_high,
                cfg.d_model,
                cfg.corr_heads,
                cfg.ffn_hidden,
                cfg.pos_every_block,
            ),
            fuse: Fuse::new(pb, cfg.c_high, cfg.c_low, cfg.fuse_channels, cfg.fuse_res_blocks),
            head1: Conv2d::pointwise(pb, "head1", cfg.fuse_channels, cfg.head_dim),
            head2: Conv2d::pointwise(pb, "head2", cfg.fuse_channels, cfg.head_dim),
            aug: Conv2d::pointwise(pb, "aug", cfg.c_high, cfg.head_dim),
            alpha: pb.constant("alpha", &[1], cfg.alpha_init),
            tau: cfg.tau,
        }))
    }

    /// Head features over all `N+1` images, in token form.
    pub fn project_heads<T: Scalar>(&self, g: &Graph<'_, T>, r_prime: Var, r_high_aug: Var) -> Result<(Var, Var)> {
        let (a, b) = (g.shape(r_prime), g.shape(r_high_aug));
        ensure_shape(a.len() == 4 && b.len() == 4 && a[0] == b[0] && a[2..] == b[2..], || {
            format!("head inputs disagree: {a:?} vs {b:?}")
        })?;
        let f1 = g.to_tokens(self.head1.forward(g, r_prime));
        let extra = g.scale_by(self.aug.forward(g, r_high_aug), g.param(self.alpha));
        let f2 = g.to_tokens(g.add(self.head2.forward(g, r_prime), extra));
        Ok((f1, f2))
    }

    /// `block_l: N×1×H×W`, `ref_lab: 1×3×H×W` (H, W multiples of 4). `hi_of`
    /// maps the high-level reference-plus-block tokens to the transformer's
    /// input state (the linkage query).
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        block_l: Var,
        ref_lab: Var,
        flags: CorrespondenceFlags,
        hi_of: impl FnOnce(Var) -> Result<Var>,
    ) -> Result<CorrespondenceOut> {
        let (bs, rs) = (g.shape(block_l), g.shape(ref_lab));
        ensure_shape(bs.len() == 4 && bs[1] == 1, || format!("block must be N×1×H×W, got {bs:?}"))?;
        ensure_shape(rs == [1, 3, bs[2], bs[3]], || format!("reference {rs:?} does not match block {bs:?}"))?;
        ensure_shape(bs[2] % 4 == 0 && bs[3] % 4 == 0, || format!("H, W must be multiples of 4, got {bs:?}"))?;
        let (n, h, w) = (bs[0], bs[2] / 4, bs[3] / 4);
        let ref_l = g.slice(ref_lab, 1, 0, 1);
        let ref_ab = g.slice(ref_lab, 1, 1, 2);
        let images = g.concat(&[block_l, ref_l], 0);
        let (r_low, r_high) = self.backbone.forward(g, images)?;

        let (r_high_aug, ho, r_tokens) = if flags.no_transformer {
            (self.ct.forward(g, r_high, None)?.cnn, None, None)
        } else {
            let r_tokens = g.to_tokens(self.tokenize.forward(g, r_high));
            let hi = hi_of(r_tokens)?;
            let out = self.ct.forward(g, r_high, Some(hi))?;
            (out.cnn, out.tok, Some(r_tokens))
        };
        let r_prime = self.fuse.forward(g, r_high_aug, r_low)?;
        let (f1, f2) = self.project_heads(g, r_prime, r_high_aug)?;

        let y_ab = g.to_tokens(g.avg_pool(ref_ab, 4));
        let rows = n * h * w;
        let head = |f: Var| {
            let f_b = g.slice(f, 0, 0, rows);
            let f_y = g.slice(f, 0, rows, h * w);
            let m = correlation(g, f_b, f_y);
            let wab = g.from_tokens(warp_colors(g, m, y_ab, self.tau), n, h, w);
            let s = g.from_tokens(similarity_map(g, m), n, h, w);
            (m, wab, s)
        };
        let (m1, w1, s1) = head(f1);
        let (m2, w2, s2) = if flags.single_head { (m1, w1, s1) } else { head(f2) };
        Ok(CorrespondenceOut { w1, w2, s1, s2, m1, m2, ho, r_tokens, layout: (n, h, w) })
    }
}
