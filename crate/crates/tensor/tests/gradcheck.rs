//! Central finite differences against the tape for every op, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scorefusion_tensor::{ConvSpec, Graph, PadMode, ParamId, ParamStore, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks every scalar of every parameter; returns the worst relative error.
fn check(store: &mut ParamStore<f64>, f: &dyn Fn(&mut Graph<'_, f64>) -> Var) -> f64 {
    let grads = {
        let mut g = Graph::new(&*store);
        let l = f(&mut g);
        g.backward(l).unwrap()
    };
    let loss = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let l = f(&mut g);
        g.value(l).data()[0]
    };
    let h = 1e-6;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let lp = loss(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let lm = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.get(id).map(|t| t.data()[k]).unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn conv_linear_and_pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[2, 3, 4, 4, 4])).unwrap();
    let w = store.add("w", rand_tensor(&mut rng, &[2, 3, 3, 3, 3])).unwrap();
    let b = store.add("b", rand_tensor(&mut rng, &[2])).unwrap();
    let lw = store.add("lw", rand_tensor(&mut rng, &[2, 5])).unwrap();
    let lb = store.add("lb", rand_tensor(&mut rng, &[2])).unwrap();
    let emb = rand_tensor(&mut rng, &[2, 5]);
    let target = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);
    let f = move |g: &mut Graph<'_, f64>| {
        let xv = g.param(x);
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.conv(xv, wv, Some(bv), ConvSpec::down(false)).unwrap();
        let e = g.input(emb.clone());
        let (lwv, lbv) = (g.param(lw), g.param(lb));
        let shift = g.linear(e, lwv, lbv).unwrap();
        let y = g.channel_shift(y, shift).unwrap();
        let y = g.silu(y);
        let y = g.scale(y, 0.7);
        g.mse(y, target.clone()).unwrap()
    };
    let err = check(&mut store, &f);
    assert!(err < 1e-5, "worst relative error {err}");
}

#[test]
fn planar_and_circular_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[2, 2, 1, 6, 4])).unwrap();
    let w1 = store.add("w1", rand_tensor(&mut rng, &[3, 2, 1, 3, 3])).unwrap();
    let w2 = store.add("w2", rand_tensor(&mut rng, &[2, 3, 3, 3, 3])).unwrap();
    let target = rand_tensor(&mut rng, &[2, 3, 1, 6, 4]);
    let target2 = rand_tensor(&mut rng, &[1, 2, 2, 4, 4]);
    let f = move |g: &mut Graph<'_, f64>| {
        let xv = g.param(x);
        let wv = g.param(w1);
        let y = g.conv(xv, wv, None, ConvSpec::same(3, true)).unwrap();
        let a = g.mse(y, target.clone()).unwrap();
        let wv2 = g.param(w2);
        let z = g.input(rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[1, 3, 2, 4, 4]));
        let spec = ConvSpec::same(3, false).with_pad_mode(PadMode::Circular);
        let y2 = g.conv(z, wv2, None, spec).unwrap();
        let b = g.mse(y2, target2.clone()).unwrap();
        g.add(a, b).unwrap()
    };
    let err = check(&mut store, &f);
    assert!(err < 1e-5, "worst relative error {err}");
}

#[test]
fn normalisation_resampling_and_channel_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[2, 4, 2, 2, 3])).unwrap();
    let gamma = store.add("gamma", rand_tensor(&mut rng, &[4])).unwrap();
    let beta = store.add("beta", rand_tensor(&mut rng, &[4])).unwrap();
    let scores = rand_tensor(&mut rng, &[2, 3, 4, 2, 6]);
    let extra = rand_tensor(&mut rng, &[2, 1, 4, 2, 6]);
    let target = rand_tensor(&mut rng, &[2, 1, 4, 2, 6]);
    let f = move |g: &mut Graph<'_, f64>| {
        let xv = g.param(x);
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.group_norm(xv, gv, bv, 2, 1e-5).unwrap();
        let y = g.upsample_nearest(y, [2, 1, 2]).unwrap();
        let logits = g.slice_channels(y, 0, 3).unwrap();
        let resid = g.slice_channels(y, 3, 1).unwrap();
        let p = g.softmax_channels(logits).unwrap();
        let weighted = g.mul_const(p, scores.clone()).unwrap();
        let mixed = g.sum_channels(weighted).unwrap();
        let mixed = g.add_const(mixed, &extra).unwrap();
        let out = g.add(mixed, resid).unwrap();
        g.mse(out, target.clone()).unwrap()
    };
    let err = check(&mut store, &f);
    assert!(err < 1e-5, "worst relative error {err}");
}

#[test]
fn gradients_skip_constant_inputs() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::full(&[1, 1, 1, 1, 1], 2.0)).unwrap();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::full(&[1, 1, 1, 2, 2], 1.0));
    let wv = g.param(w);
    let y = g.conv(x, wv, None, ConvSpec::pointwise()).unwrap();
    let l = g.mse(y, Tensor::zeros(&[1, 1, 1, 2, 2])).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.len(), 1);
    // d/dw mean((w·1)^2) = 2w = 4
    assert!((grads.get(w).unwrap().data()[0] - 4.0).abs() < 1e-12);
}
