//! Encoder-decoder that turns warped guidance into chrominance.

use chromalink_autograd::nn::{Conv2d, Linear};
use chromalink_autograd::{Graph, ParamBuilder, Scalar, Tensor, Var};
use rand::Rng;

use crate::colorspace::LabFrame;
use crate::config::PipelineConfig;
use crate::ctblock::CtStack;
use crate::error::{ensure_shape, Result};

pub const INPUT_CHANNELS: usize = 10;
const IN_EPS: f64 = 1e-5;

/// Two 3×3 convolutions with instance norm and ReLU; the first may stride.
#[derive(Debug, Clone)]
pub struct ConvPair {
    pub a: Conv2d,
    pub b: Conv2d,
}

impl ConvPair {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        pb.scope(name, |pb| ConvPair {
            a: Conv2d::new(pb, "a", cin, cout, 3, stride),
            b: Conv2d::new(pb, "b", cout, cout, 3, 1),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let y = g.relu(g.instance_norm(self.a.forward(g, x), IN_EPS));
        g.relu(g.instance_norm(self.b.forward(g, y), IN_EPS))
    }
}

/// Graph inputs for one block.
pub struct ColorizerInput {
    /// `N×2×h×w` / `N×1×h×w` at quarter resolution.
    pub w1: Var,
    pub s1: Var,
    pub w2: Var,
    pub s2: Var,
    /// `N×1×H×W`.
    pub block_l: Var,
    /// `1×3×H×W`.
    pub ref_lab: Var,
    /// Correspondence tokens `(N+1)·h·w × d`, reference rows last.
    pub ho: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Colorizer {
    pub stem: ConvPair,
    pub enc: [ConvPair; 3],
    pub tok_proj: Linear,
    pub ct: CtStack,
    pub dec: [ConvPair; 3],
    pub out: Conv2d,
}

impl Colorizer {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &PipelineConfig) -> Self {
        let c = cfg.col_channels;
        let ch = [c, 2 * c, 4 * c, 8 * c];
        pb.scope("colorizer", |pb| Colorizer {
            stem: ConvPair::new(pb, "stem", INPUT_CHANNELS, ch[0], 1),
            enc: [
                ConvPair::new(pb, "enc1", ch[0], ch[1], 2),
                ConvPair::new(pb, "enc2", ch[1], ch[2], 2),
                ConvPair::new(pb, "enc3", ch[2], ch[3], 2),
            ],
            tok_proj: Linear::new(pb, "tok_proj", cfg.d_model, cfg.col_d_model),
            ct: CtStack::new(
                pb,
                "ct",
                cfg.col_ct_blocks,
                ch[3],
                cfg.col_d_model,
                cfg.col_heads,
                2 * cfg.col_d_model,
                cfg.pos_every_block,
            ),
            dec: [
                ConvPair::new(pb, "dec3", ch[3] + ch[2], ch[2], 1),
                ConvPair::new(pb, "dec2", ch[2] + ch[1], ch[1], 1),
                ConvPair::new(pb, "dec1", ch[1] + ch[0], ch[0], 1),
            ],
            out: Conv2d::pointwise(pb, "out", ch[0], 2),
        })
    }

    /// Upsamples the guidance, concatenates the ten input channels and returns
    /// `N×2×H×W` chrominance in `(−1, 1)`. H and W must be multiples of 8.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, inp: &ColorizerInput) -> Result<Var> {
        let bs = g.shape(inp.block_l);
        ensure_shape(bs.len() == 4 && bs[1] == 1, || format!("block must be N×1×H×W, got {bs:?}"))?;
        let (n, hh, ww) = (bs[0], bs[2], bs[3]);
        ensure_shape(hh % 8 == 0 && ww % 8 == 0, || format!("H, W must be multiples of 8, got {hh}×{ww}"))?;
        ensure_shape(g.shape(inp.ref_lab) == [1, 3, hh, ww], || {
            format!("reference {:?} does not match block {bs:?}", g.shape(inp.ref_lab))
        })?;
        for (v, c) in [(inp.w1, 2), (inp.s1, 1), (inp.w2, 2), (inp.s2, 1)] {
            let s = g.shape(v);
            ensure_shape(s.len() == 4 && s[0] == n && s[1] == c, || format!("guidance {s:?} for block {bs:?}"))?;
        }
        let up = |v: Var| g.resize(v, hh, ww);
        let refs: Vec<Var> = (0..n).map(|_| inp.ref_lab).collect();
        let y = if n == 1 { inp.ref_lab } else { g.concat(&refs, 0) };
        let x = g.concat(&[up(inp.w1), up(inp.s1), up(inp.w2), up(inp.s2), inp.block_l, y], 1);

        let e0 = self.stem.forward(g, x);
        let e1 = self.enc[0].forward(g, e0);
        let e2 = self.enc[1].forward(g, e1);
        let e3 = self.enc[2].forward(g, e2);
        let (bh, bw) = (hh / 8, ww / 8);
        let tok = match inp.ho {
            None => None,
            Some(ho) => {
                let hs = g.shape(ho);
                let (qh, qw) = (hh / 4, ww / 4);
                ensure_shape(hs.len() == 2 && hs[0] == (n + 1) * qh * qw && hs[1] == self.tok_proj.in_features, || {
                    format!("ho {hs:?} does not match {}×{qh}×{qw} tokens", n + 1)
                })?;
                let frames = g.slice(ho, 0, 0, n * qh * qw);
                let grid = g.avg_pool(g.from_tokens(frames, n, qh, qw), 2);
                Some(self.tok_proj.forward(g, g.to_tokens(grid)))
            }
        };
        let mid = self.ct.forward(g, e3, tok)?.cnn;
        assert_eq!(g.shape(mid)[2..], [bh, bw]);

        let step = |x: Var, skip: Var, blk: &ConvPair| {
            let s = g.shape(skip);
            blk.forward(g, g.concat(&[g.resize(x, s[2], s[3]), skip], 1))
        };
        let d2 = step(mid, e2, &self.dec[0]);
        let d1 = step(d2, e1, &self.dec[1]);
        let d0 = step(d1, e0, &self.dec[2]);
        Ok(g.tanh(self.out.forward(g, d0)))
    }
}

/// Attaches predicted chrominance to the input luminance. `block_l` is
/// `N×1×H×W`, `ab` is `N×2×H×W`.
pub fn assemble_lab<T: Scalar>(block_l: &Tensor<T>, ab: &Tensor<T>) -> Result<Vec<LabFrame<T>>> {
    ensure_shape(block_l.rank() == 4 && block_l.dim(1) == 1, || format!("l must be N×1×H×W, got {:?}", block_l.shape()))?;
    let (n, h, w) = (block_l.dim(0), block_l.dim(2), block_l.dim(3));
    ensure_shape(ab.shape() == [n, 2, h, w], || format!("ab {:?} does not match l {:?}", ab.shape(), block_l.shape()))?;
    (0..n)
        .map(|i| {
            let l = block_l.index0(i).reshape(&[h, w])?;
            LabFrame::new(l, ab.index0(i))
        })
        .collect()
}
