//! Parallel CNN/Transformer blocks, 3D sine position embeddings and the
//! residual fusion of high- and low-level features.

use chromalink_autograd::nn::{Conv2d, LayerNorm, Linear};
use chromalink_autograd::{Graph, ParamBuilder, ParamId, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{ensure_shape, Error, Result};

const IN_EPS: f64 = 1e-5;

/// Sine/cosine embedding for tokens ordered `(t, y, x)` row-major, shape
/// `(n·h·w)×d`. Each axis gets `d/3` channels of interleaved `(sin, cos)`
/// pairs with frequencies `10000^(−2i/(d/3))`.
pub fn position_embedding_3d<T: Scalar>(n: usize, h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(6) {
        return Err(Error::Config(format!("position embedding width {d} is not a positive multiple of 6")));
    }
    let band = d / 3;
    let freqs: Vec<f64> = (0..band / 2).map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / band as f64)).collect();
    let mut out = Vec::with_capacity(n * h * w * d);
    for t in 0..n {
        for y in 0..h {
            for x in 0..w {
                for pos in [t, y, x] {
                    for &f in &freqs {
                        let a = pos as f64 * f;
                        out.push(T::of(a.sin()));
                        out.push(T::of(a.cos()));
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n * h * w, d], out)?)
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d: usize, heads: usize) -> Self {
        pb.scope(name, |pb| Attention {
            q: Linear::new(pb, "q", d, d),
            k: Linear::new(pb, "k", d, d),
            v: Linear::new(pb, "v", d, d),
            o: Linear::new(pb, "o", d, d),
            heads,
        })
    }

    /// Queries and keys come from `qk`, values from `val`. Returns the
    /// projected output and each head's attention matrix.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, qk: Var, val: Var) -> (Var, Vec<Var>) {
        let d = self.q.out_features;
        let dh = d / self.heads;
        let q = self.q.forward(g, qk);
        let k = self.k.forward(g, qk);
        let v = self.v.forward(g, val);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh);
            let kh = g.slice(k, 1, h * dh, dh);
            let vh = g.slice(v, 1, h * dh, dh);
            let a = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), scale));
            outs.push(g.matmul(a, vh));
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1) };
        (self.o.forward(g, cat), weights)
    }
}

#[derive(Debug, Clone)]
pub struct CtBlock {
    pub c2t: Conv2d,
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub t2c: Conv2d,
}

pub struct CtBlockOut {
    pub cnn: Var,
    pub tok: Option<Var>,
    pub attn: Vec<Var>,
}

impl CtBlock {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        channels: usize,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        pb.scope(name, |pb| CtBlock {
            c2t: Conv2d::pointwise(pb, "c2t", channels, d),
            ln1: LayerNorm::new(pb, "ln1", d),
            attn: Attention::new(pb, "attn", d, heads),
            ln2: LayerNorm::new(pb, "ln2", d),
            ffn1: Linear::new(pb, "ffn1", d, ffn_hidden),
            ffn2: Linear::new(pb, "ffn2", ffn_hidden, d),
            conv1: Conv2d::new(pb, "conv1", channels, channels, 3, 1),
            conv2: Conv2d::new(pb, "conv2", channels, channels, 3, 1),
            t2c: Conv2d::pointwise(pb, "t2c", d, channels),
        })
    }

    /// Projections feeding one branch from the other.
    pub fn cross_projections(&self) -> Vec<ParamId> {
        [self.c2t.params(), self.t2c.params()].concat()
    }

    /// Projections whose output is added onto the token stream.
    pub fn token_output_projections(&self) -> Vec<ParamId> {
        [self.c2t.params(), self.attn.o.params(), self.ffn2.params()].concat()
    }

    /// `cnn: B×C×h×w`; `tok: (B·h·w)×d` with rows ordered like `to_tokens`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, cnn: Var, tok: Option<Var>, pos: Option<Var>) -> Result<CtBlockOut> {
        let s = g.shape(cnn);
        ensure_shape(s.len() == 4 && s[1] == self.conv1.in_channels, || {
            format!("ct block expects B×{}×h×w, got {s:?}", self.conv1.in_channels)
        })?;
        let (b, h, w) = (s[0], s[2], s[3]);
        let mut attn = Vec::new();
        let tok_out = match tok {
            None => None,
            Some(t) => {
                let ts = g.shape(t);
                ensure_shape(ts == [b * h * w, self.attn.q.in_features], || {
                    format!("token grid {ts:?} does not match layout {b}×{h}×{w}×{}", self.attn.q.in_features)
                })?;
                let t = g.add(t, g.to_tokens(self.c2t.forward(g, cnn)));
                let a = self.ln1.forward(g, t);
                let qk = match pos {
                    Some(p) => g.add(a, p),
                    None => a,
                };
                let (y, weights) = self.attn.forward(g, qk, a);
                attn = weights;
                let t = g.add(t, y);
                let f = self.ffn2.forward(g, g.relu(self.ffn1.forward(g, self.ln2.forward(g, t))));
                Some(g.add(t, f))
            }
        };
        let y = g.relu(g.instance_norm(self.conv1.forward(g, cnn), IN_EPS));
        let mut y = g.instance_norm(self.conv2.forward(g, y), IN_EPS);
        if let Some(t) = tok_out {
            y = g.add(y, self.t2c.forward(g, g.from_tokens(t, b, h, w)));
        }
        Ok(CtBlockOut { cnn: g.relu(g.add(cnn, y)), tok: tok_out, attn })
    }
}

/// A stack of [`CtBlock`]s sharing one position embedding.
#[derive(Debug, Clone)]
pub struct CtStack {
    pub blocks: Vec<CtBlock>,
    pub d_model: usize,
    pub pos_every_block: bool,
}

pub struct CtStackOut {
    pub cnn: Var,
    pub tok: Option<Var>,
    pub attn: Vec<Var>,
}

impl CtStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        depth: usize,
        channels: usize,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        pos_every_block: bool,
    ) -> Self {
        let blocks = pb.scope(name, |pb| {
            (0..depth).map(|i| CtBlock::new(pb, &format!("block{i}"), channels, d, heads, ffn_hidden)).collect()
        });
        CtStack { blocks, d_model: d, pos_every_block }
    }

    /// Runs every block. `tok = None` runs the CNN branch alone.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, cnn: Var, tok: Option<Var>) -> Result<CtStackOut> {
        let s = g.shape(cnn);
        ensure_shape(s.len() == 4, || format!("expected B×C×h×w, got {s:?}"))?;
        let pos = match tok {
            Some(_) => Some(g.constant(position_embedding_3d(s[0], s[2], s[3], self.d_model)?)),
            None => None,
        };
        let (mut cnn, mut tok) = (cnn, tok);
        let mut attn = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = if i == 0 || self.pos_every_block { pos } else { None };
            let out = blk.forward(g, cnn, tok, p)?;
            cnn = out.cnn;
            tok = out.tok;
            attn.extend(out.attn);
        }
        Ok(CtStackOut { cnn, tok, attn })
    }
}

/// `relu(x + IN(conv(relu(IN(conv(x))))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize) -> Self {
        pb.scope(name, |pb| ResBlock {
            conv1: Conv2d::new(pb, "conv1", channels, channels, 3, 1),
            conv2: Conv2d::new(pb, "conv2", channels, channels, 3, 1),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let y = g.relu(g.instance_norm(self.conv1.forward(g, x), IN_EPS));
        let y = g.instance_norm(self.conv2.forward(g, y), IN_EPS);
        g.relu(g.add(x, y))
    }
}

/// Concatenates augmented high-level and low-level features, projects to
/// the fused width and refines with residual blocks.
#[derive(Debug, Clone)]
pub struct Fuse {
    pub proj: Conv2d,
    pub blocks: Vec<ResBlock>,
}

impl Fuse {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        c_high: usize,
        c_low: usize,
        out: usize,
        depth: usize,
    ) -> Self {
        pb.scope("fuse", |pb| Fuse {
            proj: Conv2d::pointwise(pb, "proj", c_high + c_low, out),
            blocks: (0..depth).map(|i| ResBlock::new(pb, &format!("res{i}"), out)).collect(),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, r_high_aug: Var, r_low: Var) -> Result<Var> {
        let (a, b) = (g.shape(r_high_aug), g.shape(r_low));
        ensure_shape(a.len() == 4 && b.len() == 4 && a[0] == b[0] && a[2..] == b[2..], || {
            format!("fuse inputs disagree: {a:?} vs {b:?}")
        })?;
        ensure_shape(a[1] + b[1] == self.proj.in_channels, || {
            format!("fuse expects {} channels, got {} + {}", self.proj.in_channels, a[1], b[1])
        })?;
        let mut x = g.relu(self.proj.forward(g, g.concat(&[r_high_aug, r_low], 1)));
        for blk in &self.blocks {
            x = blk.forward(g, x);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chromalink_autograd::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn embedding_origin_and_range() {
        let pe = position_embedding_3d::<f64>(2, 3, 4, 12).unwrap();
        assert_eq!(pe.shape(), &[24, 12]);
        for (i, &v) in pe.data()[..12].iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.max_abs() <= 1.0);
        assert!(position_embedding_3d::<f64>(1, 1, 1, 8).is_err());
    }

    #[test]
    fn time_shift_changes_only_temporal_band() {
        let (h, w, d) = (3, 4, 18);
        let pe = position_embedding_3d::<f64>(2, h, w, d).unwrap();
        for p in 0..h * w {
            for c in 0..d {
                let (a, b) = (pe.data()[p * d + c], pe.data()[(h * w + p) * d + c]);
                if c >= d / 3 {
                    assert_eq!(a, b);
                }
            }
            assert_ne!(&pe.data()[p * d..p * d + d / 3], &pe.data()[(h * w + p) * d..(h * w + p) * d + d / 3]);
        }
    }

    #[test]
    fn similarity_decays_with_distance() {
        let d = 48;
        let pe = position_embedding_3d::<f64>(1, 8, 8, d).unwrap();
        let row = |y: usize, x: usize| &pe.data()[(y * 8 + x) * d..(y * 8 + x + 1) * d];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sims: Vec<f64> = (0..8).map(|x| dot(row(0, 0), row(0, x))).collect();
        for k in 1..4 {
            assert!(sims[k] < sims[k - 1], "{sims:?}");
        }
        let own = dot(row(0, 0), row(0, 0));
        for y in 0..8 {
            for x in 0..8 {
                if (y, x) != (0, 0) {
                    assert!(dot(row(0, 0), row(y, x)) < own);
                }
            }
        }
    }

    struct Fixture {
        store: ParamStore<f64>,
        blk: CtBlock,
    }

    fn fixture(c: usize, d: usize, heads: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blk = CtBlock::new(&mut ParamBuilder::new(&mut store, &mut rng, "others"), "blk", c, d, heads, 2 * d);
        Fixture { store, blk }
    }

    fn zero(store: &mut ParamStore<f64>, ids: &[ParamId]) {
        for &id in ids {
            let z = Tensor::zeros(store.get(id).shape());
            store.set(id, z).unwrap();
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let f = fixture(4, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::with_params(&f.store);
        let cnn = g.constant(rand_tensor(&mut rng, &[2, 4, 2, 2]));
        let tok = g.constant(rand_tensor(&mut rng, &[8, 12]));
        let out = f.blk.forward(&g, cnn, Some(tok), None).unwrap();
        assert_eq!(out.attn.len(), 3);
        for a in out.attn {
            let a = g.value(a);
            for r in a.data().chunks(a.dim(1)) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zeroed_output_projections_give_token_identity() {
        let mut f = fixture(4, 12, 2);
        zero(&mut f.store, &f.blk.token_output_projections());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tok_in = rand_tensor(&mut rng, &[12, 12]);
        let g = Graph::with_params(&f.store);
        let cnn = g.constant(rand_tensor(&mut rng, &[3, 4, 2, 2]));
        let pos = g.constant(position_embedding_3d(3, 2, 2, 12).unwrap());
        let out = f.blk.forward(&g, cnn, Some(g.constant(tok_in.clone())), Some(pos)).unwrap();
        assert_eq!(*g.value(out.tok.unwrap()), tok_in);
    }

    #[test]
    fn zeroed_cross_projections_decouple_cnn_branch() {
        let mut f = fixture(4, 12, 2);
        zero(&mut f.store, &f.blk.cross_projections());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cnn_in = rand_tensor(&mut rng, &[2, 4, 3, 2]);
        let g = Graph::with_params(&f.store);
        let cnn = g.constant(cnn_in);
        let with_tok = f.blk.forward(&g, cnn, Some(g.constant(rand_tensor(&mut rng, &[12, 12]))), None).unwrap();
        let alone = f.blk.forward(&g, cnn, None, None).unwrap();
        assert_eq!(*g.value(with_tok.cnn), *g.value(alone.cnn));
    }

    #[test]
    fn frame_permutation_equivariance() {
        let f = fixture(4, 12, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, h, w) = (3, 2, 2);
        let cnn_in = rand_tensor(&mut rng, &[n, 4, h, w]);
        let tok_in = rand_tensor(&mut rng, &[n * h * w, 12]);
        let pe = position_embedding_3d::<f64>(n, h, w, 12).unwrap();
        let perm = [2usize, 0, 1];
        let permute_rows = |t: &Tensor<f64>, per: usize| {
            let mut d = Vec::new();
            for &p in &perm {
                d.extend_from_slice(&t.data()[p * per..(p + 1) * per]);
            }
            Tensor::from_vec(t.shape(), d).unwrap()
        };
        let run = |c: Tensor<f64>, t: Tensor<f64>, p: Tensor<f64>| {
            let g = Graph::with_params(&f.store);
            let out = f.blk.forward(&g, g.constant(c), Some(g.constant(t)), Some(g.constant(p))).unwrap();
            ((*g.value(out.cnn)).clone(), (*g.value(out.tok.unwrap())).clone())
        };
        let (c0, t0) = run(cnn_in.clone(), tok_in.clone(), pe.clone());
        let (c1, t1) = run(
            permute_rows(&cnn_in, 4 * h * w),
            permute_rows(&tok_in, h * w * 12),
            permute_rows(&pe, h * w * 12),
        );
        let close = |a: &Tensor<f64>, b: &Tensor<f64>| a.zip_map(b, |x, y| (x - y).abs()).max_abs() < 1e-12;
        assert!(close(&permute_rows(&c0, 4 * h * w), &c1));
        assert!(close(&permute_rows(&t0, h * w * 12), &t1));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let f = fixture(4, 12, 2);
        let g = Graph::with_params(&f.store);
        let cnn = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let tok = g.constant(Tensor::zeros(&[5, 12]));
        assert!(f.blk.forward(&g, cnn, Some(tok), None).is_err());
    }

    #[test]
    fn fuse_shape_and_degenerate_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fuse = Fuse::new(&mut ParamBuilder::new(&mut store, &mut rng, "others"), 6, 4, 10, 3);
        let g = Graph::with_params(&store);
        let hi = g.constant(rand_tensor(&mut rng, &[3, 6, 16, 24]));
        let lo = g.constant(Tensor::zeros(&[3, 4, 16, 24]));
        let out = fuse.forward(&g, hi, lo).unwrap();
        assert_eq!(g.shape(out), vec![3, 10, 16, 24]);
        assert!(g.value(out).all_finite());
        let bad = g.constant(Tensor::zeros(&[3, 4, 8, 24]));
        assert!(fuse.forward(&g, hi, bad).is_err());
    }
}
