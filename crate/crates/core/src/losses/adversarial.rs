use chromalink_autograd::nn::Conv2d;
use chromalink_autograd::{Graph, ParamBuilder, Scalar, Var};
use rand::Rng;

use crate::error::{ensure_shape, Result};

const SLOPE: f64 = 0.2;

/// Patch discriminator over `B×3×H×W` Lab images (scaled l, ab): three
/// stride-2 convolutions with leaky ReLU and a one-channel patch score.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub convs: Vec<Conv2d>,
    pub out: Conv2d,
}

impl PatchDiscriminator {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, channels: usize) -> Self {
        let c = channels;
        pb.in_group("disc", |pb| {
            pb.scope("disc", |pb| PatchDiscriminator {
                convs: vec![
                    Conv2d::new(pb, "c1", 3, c, 3, 2),
                    Conv2d::new(pb, "c2", c, 2 * c, 3, 2),
                    Conv2d::new(pb, "c3", 2 * c, 4 * c, 3, 2),
                ],
                out: Conv2d::new(pb, "out", 4 * c, 1, 3, 1),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, lab: Var) -> Result<Var> {
        let s = g.shape(lab);
        ensure_shape(s.len() == 4 && s[1] == 3, || format!("discriminator expects B×3×H×W, got {s:?}"))?;
        let mut x = lab;
        for c in &self.convs {
            x = g.leaky_relu(c.forward(g, x), SLOPE);
        }
        Ok(self.out.forward(g, x))
    }
}

/// `mean((D(fake) − 1)²)`.
pub fn lsgan_generator_loss<T: Scalar>(g: &Graph<'_, T>, d_fake: Var) -> Var {
    g.mean(g.square(g.add_scalar(d_fake, -T::one())))
}

/// `½·mean((D(real) − 1)²) + ½·mean(D(fake)²)`.
pub fn lsgan_discriminator_loss<T: Scalar>(g: &Graph<'_, T>, d_real: Var, d_fake: Var) -> Var {
    let real = g.mean(g.square(g.add_scalar(d_real, -T::one())));
    let fake = g.mean(g.square(d_fake));
    g.scale(g.add(real, fake), T::of(0.5))
}

/// Generator and discriminator objectives for one batch; the discriminator
/// term sees the prediction detached.
pub fn adversarial_loss<T: Scalar>(g: &Graph<'_, T>, d: &PatchDiscriminator, pred: Var, real: Var) -> Result<(Var, Var)> {
    let gen = lsgan_generator_loss(g, d.forward(g, pred)?);
    let disc = lsgan_discriminator_loss(g, d.forward(g, real)?, d.forward(g, g.detach(pred))?);
    Ok((gen, disc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chromalink_autograd::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lsgan_values() {
        let g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let zeros = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert_eq!(g.scalar_value(lsgan_generator_loss(&g, ones)), 0.0);
        assert_eq!(g.scalar_value(lsgan_generator_loss(&g, zeros)), 1.0);
        assert_eq!(g.scalar_value(lsgan_discriminator_loss(&g, ones, zeros)), 0.0);
        assert_eq!(g.scalar_value(lsgan_discriminator_loss(&g, zeros, ones)), 1.0);
    }

    #[test]
    fn discriminator_gradient_stops_at_the_prediction() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = PatchDiscriminator::new(&mut ParamBuilder::new(&mut store, &mut rng, "others"), 4);
        assert!(store.iter().all(|(_, e)| e.group == "disc"));
        let g = Graph::with_params(&store);
        let pred = g.variable(Tensor::from_fn(&[1, 3, 16, 16], |i| ((i as f64) * 0.1).sin()));
        let real = g.constant(Tensor::from_fn(&[1, 3, 16, 16], |i| ((i as f64) * 0.3).cos()));
        let (gen, disc) = adversarial_loss(&g, &d, pred, real).unwrap();
        assert_eq!(g.shape(d.forward(&g, real).unwrap()), vec![1, 1, 2, 2]);
        let gd = g.backward(disc);
        assert!(gd.wrt(pred).is_none_or(|t| t.max_abs() == 0.0));
        let gg = g.backward(gen);
        assert!(gg.wrt(pred).unwrap().max_abs() > 0.0);
    }
}
