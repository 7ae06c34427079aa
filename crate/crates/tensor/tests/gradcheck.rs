//! Central finite differences against the hand-written backward passes.

use std::sync::Arc;

use fitvid_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Builds a scalar from `inputs`; contracted against fixed random weights so
/// every output element matters.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = |g: &Graph<f64>, vars: &[Var<f64>], w: &Option<Tensor<f64>>| -> (Var<f64>, Tensor<f64>) {
        let out = f(g, vars);
        let w = w.clone().unwrap_or_else(|| Tensor::from_fn(out.shape(), |_| 0.5 + (0.37 * 7.0f64).sin()));
        let wv = g.constant(w.clone());
        let prod = g.mul(&out, &wv);
        (g.sum(&prod), w)
    };
    let g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(Arc::new(t.clone()))).collect();
    let weights = {
        let out = f(&Graph::inference(), &vars);
        Some(Tensor::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0)))
    };
    let (loss, _) = probe(&g, &vars, &weights);
    let mut grads = g.backward(&loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.take_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        probe(&g, &vars, &weights).0.value().item()
    };
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(&v[0], &v[1]);
        let d = g.sub(&s, &v[1]);
        let m = g.mul(&d, &v[1]);
        let e = g.exp(&m);
        let t = g.tanh(&e);
        let q = g.square(&t);
        let sw = g.swish(&q);
        let sg = g.sigmoid(&sw);
        let sc = g.scale(&sg, -2.5);
        g.add_scalar(&sc, 0.25)
    });
    check(vec![a], |g, v| g.relu(&g.add_scalar(&v[0], 0.01)));
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let b = random(&[4], &mut rng);
    let y = random(&[3, 2], &mut rng);
    check(vec![x, w, b, y], |g, v| {
        let l = g.linear(&v[0], &v[1], &v[2]);
        let c = g.concat_cols(&[&l, &v[3]]);
        let s = g.slice_cols(&c, 1, 4);
        g.reshape(&s, &[2, 6])
    });
}

#[test]
fn sequence_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    check(vec![a, b], |g, v| {
        let st = g.stack_steps(&[&v[0], &v[1], &v[0]]);
        let sel = g.select_step(&st, 2);
        let rep = g.repeat_rows(&sel, 3);
        let st2 = g.select_step(&g.reshape(&rep, &[2, 3, 3]), 1);
        g.mul(&st2, &v[1])
    });
}

#[test]
fn image_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 4, 4, 3], &mut rng);
    let gate = random(&[2, 3], &mut rng);
    check(vec![x.clone(), gate], |g, v| {
        let sm = g.spatial_mean(&v[0]);
        let gg = g.sigmoid(&g.mul(&sm, &v[1]));
        let y = g.channel_gate(&v[0], &gg);
        g.upsample2x(&y)
    });
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, stride) in [(3, 1), (3, 2), (5, 1), (1, 1), (1, 2)] {
        let x = random(&[2, 5, 6, 3], &mut rng);
        let w = random(&[k, k, 3, 2], &mut rng);
        let b = random(&[2], &mut rng);
        check(vec![x, w, b], move |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), stride));
    }
}

#[test]
fn batch_norm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 2, 2, 4], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.batch_norm_train(&v[0], &v[1], &v[2], 1e-5).y
    });
    check(vec![x, gamma, beta], |g, v| {
        g.batch_norm_eval(&v[0], &v[1], &v[2], &[0.1, -0.2, 0.3, 0.0], &[1.5, 0.5, 2.0, 1.0], 1e-5)
    });
}

#[test]
fn inference_graph_records_nothing() {
    let g = Graph::<f32>::inference();
    let x = g.leaf(Arc::new(Tensor::ones(&[2, 2])));
    let y = g.sigmoid(&g.add(&x, &x));
    assert!(!y.is_tracked());
    assert!(g.is_empty());
}

#[test]
fn fan_out_accumulates_gradients() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Arc::new(Tensor::from_vec(&[1], vec![3.0])));
    let y = g.mul(&x, &x);
    let z = g.add(&y, &x);
    let s = g.sum(&z);
    let grads = g.backward(&s).unwrap();
    assert_eq!(grads.get(&x).unwrap().item(), 7.0);
}
