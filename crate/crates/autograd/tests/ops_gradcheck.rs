use std::rc::Rc;

use chromalink_autograd::gradcheck::{numeric_gradient, relative_error};
use chromalink_autograd::kernels::Sample;
use chromalink_autograd::{Graph, PadMode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks d/dx of `sum(op(x, extra) ⊙ probe)` against central differences.
fn check(name: &str, shapes: &[&[usize]], op: impl Fn(&Graph<'_, f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31 + 7);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let out_shape = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        g.shape(op(&g, &vars))
    };
    let probe = rand_tensor(&mut rng, &out_shape);
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&g, &vars);
        g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    for k in 0..inputs.len() {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = op(&g, &vars);
        let p = g.constant(probe.clone());
        let loss = g.sum(g.mul(y, p));
        let grads = g.backward(loss);
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = numeric_gradient(&inputs[k], 1e-6, |x| {
            let mut ins = inputs.clone();
            ins[k] = x.clone();
            eval(&ins)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "{name} input {k}: relative error {err}");
    }
}

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check("scale", &[&[5]], |g, v| g.scale(v[0], -2.5));
    check("scale_by", &[&[2, 3], &[1]], |g, v| g.scale_by(v[0], v[1]));
    check("tanh", &[&[7]], |g, v| g.tanh(v[0]));
    check("exp", &[&[7]], |g, v| g.exp(v[0]));
    check("square", &[&[7]], |g, v| g.square(v[0]));
    check("leaky", &[&[7]], |g, v| g.leaky_relu(v[0], 0.2));
    check("sigmoid", &[&[7]], |g, v| g.unary(v[0], chromalink_autograd::Unary::Sigmoid));
    check("map", &[&[6]], |g, v| g.map(v[0], |x| x * x * x, |x| 3.0 * x * x));
    check("mean", &[&[3, 3]], |g, v| g.mean(v[0]));
}

#[test]
fn shape_ops() {
    check("concat0", &[&[2, 3], &[1, 3]], |g, v| g.concat(&[v[0], v[1], v[0]], 0));
    check("concat1", &[&[2, 2, 2, 2], &[2, 1, 2, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    check("slice", &[&[3, 5, 2]], |g, v| g.slice(v[0], 1, 1, 3));
    check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check("tokens", &[&[2, 3, 2, 2]], |g, v| g.to_tokens(v[0]));
    check("from_tokens", &[&[8, 3]], |g, v| g.from_tokens(v[0], 2, 2, 2));
}

#[test]
fn matrix_ops() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check("matmul_nt", &[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1]));
    check("matmul_tn", &[&[4, 3], &[4, 2]], |g, v| g.matmul_t(v[0], true, v[1], false));
    check("matmul_tt", &[&[4, 3], &[2, 4]], |g, v| g.matmul_t(v[0], true, v[1], true));
    check("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]));
    check("add_channel", &[&[2, 3, 2, 2], &[3]], |g, v| g.add_channel(v[0], v[1]));
    check("mean_rows", &[&[5, 3]], |g, v| g.mean_rows(v[0]));
    check("sub_row", &[&[5, 3], &[1, 3]], |g, v| g.sub_row(v[0], v[1]));
    check("softmax", &[&[3, 5]], |g, v| g.softmax_rows(v[0]));
    check("max_rows", &[&[4, 6]], |g, v| g.max_rows(v[0]));
    check("row_normalize", &[&[4, 3]], |g, v| g.row_normalize(v[0]));
    check("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn spatial_ops() {
    check("instance_norm", &[&[2, 2, 3, 4]], |g, v| g.instance_norm(v[0], 1e-5));
    for mode in [PadMode::Zero, PadMode::Circular, PadMode::Replicate] {
        check("conv3", &[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1, mode)
        });
    }
    check("conv_s2", &[&[1, 2, 6, 5], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 2, 1, PadMode::Zero));
    check("conv1x1", &[&[2, 3, 3, 3], &[2, 3, 1, 1], &[2]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 0, PadMode::Zero)
    });
    check("avg_pool", &[&[1, 2, 4, 6]], |g, v| g.avg_pool(v[0], 2));
    check("resize_up", &[&[1, 2, 3, 4]], |g, v| g.resize(v[0], 7, 9));
    check("resize_down", &[&[1, 1, 8, 6]], |g, v| g.resize(v[0], 2, 3));
    check("warp", &[&[2, 4, 5]], |g, v| {
        let samples: Vec<Sample<f64>> = (0..20)
            .map(|p| Sample::at((p % 5) as f64 - 0.3, (p / 5) as f64 + 0.45, 4, 5))
            .collect();
        g.warp(v[0], Rc::new(samples))
    });
}

#[test]
fn shared_var_accumulates() {
    let g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap());
    let y = g.mul(x, x);
    let loss = g.sum(g.add(y, x));
    let grads = g.backward(loss);
    let d = grads.wrt(x).unwrap();
    assert_eq!(d.data(), &[4.0, -3.0]);
}

#[test]
fn constants_get_no_gradient() {
    let g = Graph::<f64>::new();
    let c = g.constant(Tensor::ones(&[3]));
    let x = g.variable(Tensor::ones(&[3]));
    let loss = g.sum(g.mul(c, x));
    let grads = g.backward(loss);
    assert!(grads.wrt(c).is_none());
    assert!(grads.wrt(x).is_some());
}
