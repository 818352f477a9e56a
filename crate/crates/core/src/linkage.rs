//! Cross-block memory: query stored information into the current block's
//! tokens and store the block's output tokens back.

use chromalink_autograd::nn::Linear;
use chromalink_autograd::{Graph, ParamBuilder, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{ensure_shape, Result};

/// `x + softmax(x·mᵀ/√d)·m`.
pub fn attend_residual<T: Scalar>(g: &Graph<'_, T>, x: Var, m: Var) -> Var {
    let d = g.shape(x)[1];
    let a = g.softmax_rows(g.scale(g.matmul_nt(x, m), T::of(1.0 / (d as f64).sqrt())));
    g.add(x, g.matmul(a, m))
}

fn check_width<T: Scalar>(g: &Graph<'_, T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    ensure_shape(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], || {
        format!("{what}: token widths differ, {sa:?} vs {sb:?}")
    })
}

#[derive(Debug, Clone)]
pub struct LinkageNet {
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl LinkageNet {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, d: usize, hidden: usize) -> Self {
        pb.scope("linkage", |pb| LinkageNet {
            ffn1: Linear::new(pb, "ffn1", d, hidden),
            ffn2: Linear::new(pb, "ffn2", hidden, d),
        })
    }

    /// With no stored information the tokens pass through untouched.
    /// Otherwise `a = r + softmax(r·iᵀ/√d)·i` followed by `a + FFN(a)`.
    pub fn query<T: Scalar>(&self, g: &Graph<'_, T>, r_tokens: Var, info: Option<Var>) -> Result<Var> {
        let Some(i) = info else { return Ok(r_tokens) };
        check_width(g, r_tokens, i, "linkage query")?;
        let a = attend_residual(g, r_tokens, i);
        let f = self.ffn2.forward(g, g.relu(self.ffn1.forward(g, a)));
        Ok(g.add(a, f))
    }
}

/// First store keeps `ho`; later ones compute `i + softmax(i·hoᵀ/√d)·ho`.
pub fn store<T: Scalar>(g: &Graph<'_, T>, info: Option<Var>, ho: Var) -> Result<Var> {
    match info {
        None => Ok(ho),
        Some(i) => {
            check_width(g, i, ho, "linkage store")?;
            Ok(attend_residual(g, i, ho))
        }
    }
}

/// Detached information matrix carried between blocks of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkageState<T> {
    pub info: Option<Tensor<T>>,
    /// Index of the block that last stored into this state.
    pub last_block: Option<usize>,
}

impl<T> Default for LinkageState<T> {
    fn default() -> Self {
        LinkageState { info: None, last_block: None }
    }
}

impl<T: Scalar> LinkageState<T> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_none()
    }

    pub fn reset(&mut self) {
        *self = Self::empty();
    }

    /// Stores `ho` (a value) into the state.
    pub fn store_value(&mut self, ho: &Tensor<T>, block: usize) -> Result<()> {
        let g = Graph::new();
        let info = self.info.take().map(|t| g.constant(t));
        let out = store(&g, info, g.constant(ho.clone()))?;
        self.info = Some((*g.value(out)).clone());
        self.last_block = Some(block);
        Ok(())
    }
}
