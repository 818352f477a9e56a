use std::collections::HashMap;

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: i32,
}

/// AdamW with decoupled weight decay and one base learning rate per
/// parameter group.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    group_lr: HashMap<String, f64>,
    state: HashMap<ParamId, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, group_lr: HashMap::new(), state: HashMap::new() }
    }

    pub fn with_group(mut self, group: &str, lr: f64) -> Self {
        self.group_lr.insert(group.to_string(), lr);
        self
    }

    pub fn set_group_lr(&mut self, group: &str, lr: f64) {
        self.group_lr.insert(group.to_string(), lr);
    }

    pub fn group_lr(&self, group: &str) -> Option<f64> {
        self.group_lr.get(group).copied()
    }

    /// Updates every parameter whose group is in `groups` and that received a
    /// gradient. `lr_scale` multiplies the group base rates (schedules).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, groups: &[&str], lr_scale: f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let group = store.entry(id).group.clone();
            if !groups.contains(&group.as_str()) {
                continue;
            }
            let Some(lr) = self.group_lr.get(&group).copied() else { continue };
            let Some(g) = grads.param(id) else { continue };
            let lr = lr * lr_scale;
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps);
            let bc2 = 1.0 - beta2.powi(st.steps);
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let (one, e) = (T::one(), T::of(eps));
            let step_size = T::of(lr / bc1);
            let decay = T::of(1.0 - lr * weight_decay);
            let inv_bc2 = T::of(1.0 / bc2);
            let p = store.get_mut(id).data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + e;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
    }
}

/// Piecewise-constant multiplier: `factor` applies from `epoch` onwards.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub milestones: Vec<(usize, f64)>,
}

impl StepSchedule {
    pub fn multiplier(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .map(|&(_, f)| f)
            .next_back()
            .unwrap_or(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", "others", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).with_group("others", 0.1);
        for _ in 0..300 {
            let grads = {
                let g = Graph::with_params(&store);
                let x = g.param(id);
                let loss = g.sum(g.square(x));
                g.backward(loss)
            };
            opt.step(&mut store, &grads, &["others"], 1.0);
        }
        assert!(store.get(id).max_abs() < 1e-2, "{:?}", store.get(id));
    }

    #[test]
    fn schedule_steps() {
        let s = StepSchedule { milestones: vec![(4, 0.1), (8, 0.01)] };
        assert_eq!(s.multiplier(3), 1.0);
        assert_eq!(s.multiplier(4), 0.1);
        assert_eq!(s.multiplier(9), 0.01);
    }
}
