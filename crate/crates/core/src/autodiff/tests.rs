use super::*;

/// Deterministic pseudo-random values in roughly [-1, 1].
fn wave(n: usize, seed: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * seed).sin() * 0.9 + 0.05 * seed.cos()).collect()
}

fn tensor(shape: &[usize], seed: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, wave(n, seed)).unwrap()
}

/// Compares analytic gradients of `build` (reduced to a scalar with a fixed
/// random projection) against central differences for every input.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
    let eval = |vals: &[Tensor<f64>]| -> (f64, Option<Vec<Tensor<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let proj = g.constant(tensor(g.shape(out), 0.377));
        let loss = if g.value(out).numel() == 1 {
            out
        } else {
            let m = g.sub(out, proj).unwrap();
            g.sum_sq(m)
        };
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, Some(gs))
    };
    let (_, analytic) = eval(&inputs);
    let analytic = analytic.unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let an = analytic[k].data()[i];
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / scale < tol,
                "input {k} elem {i}: analytic {an} vs numeric {fd}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    check(vec![tensor(&[2, 3], 0.7), tensor(&[2, 3], 1.3)], |g, v| g.add(v[0], v[1]).unwrap(), 1e-6);
    check(vec![tensor(&[2, 3], 0.7), tensor(&[2, 3], 1.3)], |g, v| g.sub(v[0], v[1]).unwrap(), 1e-6);
    check(vec![tensor(&[4], 0.9)], |g, v| g.scale(v[0], 2.5), 1e-6);
    check(vec![tensor(&[4], 0.9)], |g, v| g.shift_scalar(v[0], 0.3), 1e-6);
    check(vec![tensor(&[5], 1.1)], |g, v| g.relu(v[0]), 1e-6);
    check(vec![tensor(&[5], 1.1)], |g, v| g.leaky_relu(v[0], 0.2), 1e-6);
    check(vec![tensor(&[5], 1.7)], |g, v| g.softplus(v[0]), 1e-6);
    check(vec![tensor(&[5], 2.3)], |g, v| g.abs(v[0]), 1e-6);
    check(vec![tensor(&[6], 0.4).map(|x| x * 3.0)], |g, v| g.clamp(v[0], -1.0, 1.0), 1e-6);
}

#[test]
fn reductions() {
    check(vec![tensor(&[3, 2], 0.5)], |g, v| g.sum(v[0]), 1e-6);
    check(vec![tensor(&[3, 2], 0.5)], |g, v| g.sum_sq(v[0]), 1e-6);
    check(vec![tensor(&[3, 2], 0.5)], |g, v| g.sum_abs(v[0]), 1e-6);
    check(vec![tensor(&[2, 3, 2, 2], 0.8)], |g, v| g.global_avg_pool(v[0]).unwrap(), 1e-6);
}

#[test]
fn linear_algebra() {
    check(vec![tensor(&[3, 4], 0.6), tensor(&[4, 2], 1.9)], |g, v| g.matmul(v[0], v[1]).unwrap(), 1e-6);
    check(vec![tensor(&[2, 3, 2, 2], 0.6), tensor(&[3], 1.9)], |g, v| {
        g.add_channel_bias(v[0], v[1]).unwrap()
    }, 1e-6);
    check(vec![tensor(&[2, 6], 0.6)], |g, v| g.reshape(v[0], &[2, 3, 2]).unwrap(), 1e-6);
    check(vec![tensor(&[2, 5], 0.6)], |g, v| g.l2_normalize_rows(v[0]).unwrap(), 1e-5);
}

#[test]
fn convolutions() {
    check(vec![tensor(&[2, 2, 5, 5], 0.6), tensor(&[3, 2, 3, 3], 1.9)], |g, v| {
        g.conv2d(v[0], v[1], 2, 1).unwrap()
    }, 1e-5);
    check(vec![tensor(&[1, 2, 4, 4], 0.6), tensor(&[2, 3, 3, 3], 1.9)], |g, v| {
        g.conv_t2d(v[0], v[1], 2, 1, 1).unwrap()
    }, 1e-5);
}

#[test]
fn transposed_conv_doubles_size() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
    let y = g.conv_t2d(x, w, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 8, 8]);
}

#[test]
fn gdn_both_directions() {
    let beta = tensor(&[3], 0.3).map(|v| v.abs() + 0.5);
    let gamma = tensor(&[3, 3], 0.7).map(|v| v.abs() * 0.3);
    for inverse in [false, true] {
        check(vec![tensor(&[2, 3, 2, 1], 0.9), beta.clone(), gamma.clone()], move |g, v| {
            g.gdn(v[0], v[1], v[2], inverse).unwrap()
        }, 1e-5);
    }
}

#[test]
fn gdn_matches_formula() {
    let x = tensor(&[1, 3, 1, 1], 1.3);
    let beta = Tensor::from_vec(&[3], vec![1.0, 0.5, 2.0]).unwrap();
    let gamma = tensor(&[3, 3], 0.2).map(f64::abs);
    let mut g = Graph::new();
    let (xv, bv, gv) = (g.constant(x.clone()), g.constant(beta.clone()), g.constant(gamma.clone()));
    let y = g.gdn(xv, bv, gv, false).unwrap();
    for i in 0..3 {
        let mut d = beta.data()[i];
        for j in 0..3 {
            d += gamma.data()[i * 3 + j] * x.data()[j] * x.data()[j];
        }
        assert!((g.value(y).data()[i] - x.data()[i] / d.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn resampling_and_satd() {
    check(vec![tensor(&[1, 2, 3, 3], 0.6)], |g, v| g.upsample2x(v[0]).unwrap(), 1e-6);
    // offsets keep every transformed coefficient away from zero
    let a = tensor(&[2, 1, 8, 8], 0.61);
    let b = tensor(&[2, 1, 8, 8], 1.37);
    check(vec![a, b], |g, v| g.satd(v[0], v[1]).unwrap(), 1e-5);
}

#[test]
fn softmax_cross_entropy() {
    check(vec![tensor(&[3, 4], 1.2)], |g, v| g.softmax_xent(v[0], &[0, 3, 1], 1e-12).unwrap(), 1e-6);
}

#[test]
fn softmax_cross_entropy_is_floored() {
    let mut g = Graph::<f64>::new();
    let l = g.param(Tensor::from_vec(&[1, 2], vec![0.0, 1e4]).unwrap());
    let loss = g.softmax_xent(l, &[0], 1e-12).unwrap();
    assert!((g.value(loss).item() - 1e12f64.ln()).abs() < 1e-9);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(l).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn likelihoods() {
    let sigma = tensor(&[2, 3], 0.8).map(|v| v.abs() + 0.3);
    check(vec![tensor(&[2, 3], 1.1).map(|v| v * 2.0), sigma], |g, v| {
        g.gaussian_likelihood(v[0], v[1]).unwrap()
    }, 1e-5);
    check(vec![tensor(&[1, 2, 2, 2], 1.1).map(|v| v * 2.0), tensor(&[2], 0.3), tensor(&[2], 0.9)], |g, v| {
        g.logistic_likelihood(v[0], v[1], v[2]).unwrap()
    }, 1e-5);
    let p = tensor(&[5], 0.9).map(|v| v.abs() * 0.5 + 0.1);
    check(vec![p], |g, v| g.neg_log2_sum(v[0], 1e-9), 1e-6);
}

#[test]
fn shared_inputs_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap());
    let a = g.add(x, x).unwrap();
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let p = g.param(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
    let a = g.add(c, p).unwrap();
    let s = g.sum_sq(a);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[8.0, 12.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
    assert!(g.softmax_xent(a, &[5, 0], 1e-12).is_err());
    let s = g.sum(a);
    assert!(g.backward(a).is_err());
    assert!(g.backward(s).is_ok());
}
