//! Finite-difference checks of every differentiable operation at binary64.

use cdn_nn::gradcheck::{grad_check, grad_check_many, grad_check_params, probe, probe_weights};
use cdn_nn::layers::{AxialBlock, AxialConfig, FeedForward, LayerNorm, Linear, SelfAttention};
use cdn_nn::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const SMOOTH_TOL: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), probe_weights(len, seed)).unwrap()
}

/// Values bounded away from zero so the kink of ReLU is never straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = rand_tensor(shape, seed);
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn smooth(err: f64, what: &str) {
    assert!(err < SMOOTH_TOL, "{what}: relative error {err:e}");
}

#[test]
fn matmul_and_linear() {
    let x = rand_tensor(&[2, 3, 4], 1);
    let w = rand_tensor(&[4, 5], 2);
    let b = rand_tensor(&[5], 3);
    let err = grad_check_many(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y, 9)
        },
        &[x, w, b],
        EPS,
    )
    .unwrap();
    smooth(err, "linear");
}

#[test]
fn batched_matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_tensor(&[2, 4, 3], 4) } else { rand_tensor(&[2, 3, 4], 4) };
        let b = if tb { rand_tensor(&[2, 5, 4], 5) } else { rand_tensor(&[2, 4, 5], 5) };
        let err = grad_check_many(
            |g, v| {
                let y = g.bmm(v[0], v[1], ta, tb)?;
                probe(g, y, 11)
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        smooth(err, &format!("bmm ta={ta} tb={tb}"));
    }
}

#[test]
fn elementwise_binary_ops() {
    let a = rand_tensor(&[3, 4], 6);
    let b = rand_tensor(&[3, 4], 7);
    type Op = fn(&mut Graph<f64>, Var, Var) -> cdn_nn::Result<Var>;
    let ops: [(&str, Op); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (name, op) in ops {
        let err = grad_check_many(
            |g, v| {
                let y = op(g, v[0], v[1])?;
                probe(g, y, 12)
            },
            &[a.clone(), b.clone()],
            EPS,
        )
        .unwrap();
        smooth(err, name);
    }
}

#[test]
fn bias_scale_broadcast() {
    let x = rand_tensor(&[3, 4], 8);
    let b = rand_tensor(&[4], 9);
    let err = grad_check_many(
        |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            let y = g.scale(y, -1.7)?;
            let y = g.broadcast(y, 1, 3)?;
            probe(g, y, 13)
        },
        &[x, b],
        EPS,
    )
    .unwrap();
    smooth(err, "add_bias/scale/broadcast");
}

#[test]
fn shape_ops() {
    let a = rand_tensor(&[2, 3, 4], 10);
    let b = rand_tensor(&[2, 1, 4], 11);
    let err = grad_check_many(
        |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            let y = g.permute(y, &[2, 0, 1])?;
            let y = g.reshape(y, &[8, 7])?;
            probe(g, y, 14)
        },
        &[a, b],
        EPS,
    )
    .unwrap();
    smooth(err, "concat/permute/reshape");
}

#[test]
fn reductions() {
    let x = rand_tensor(&[3, 4, 2], 12);
    for axis in 0..3 {
        let err = grad_check(
            |g, x| {
                let m = g.mean(x, axis)?;
                let v = g.variance(x, axis)?;
                let y = g.concat(&[m, v], 0)?;
                probe(g, y, 15)
            },
            &x,
            EPS,
        )
        .unwrap();
        smooth(err, &format!("mean/variance axis {axis}"));
    }
    let err = grad_check(|g, x| g.mean_all(x), &x, EPS).unwrap();
    smooth(err, "mean_all");
}

#[test]
fn activations() {
    let x = away_from_zero(&[4, 5], 13);
    let err = grad_check(|g, x| { let y = g.tanh(x)?; probe(g, y, 16) }, &x, EPS).unwrap();
    smooth(err, "tanh");
    let err = grad_check(|g, x| { let y = g.sigmoid(x)?; probe(g, y, 17) }, &x, EPS).unwrap();
    smooth(err, "sigmoid");
    let err = grad_check(|g, x| { let y = g.relu(x)?; probe(g, y, 18) }, &x, EPS).unwrap();
    assert!(err < TOL, "relu: {err:e}");
}

#[test]
fn softmax_every_axis() {
    let x = rand_tensor(&[2, 3, 4], 14);
    for axis in 0..3 {
        let err = grad_check(
            |g, x| {
                let y = g.softmax(x, axis)?;
                probe(g, y, 19)
            },
            &x,
            EPS,
        )
        .unwrap();
        smooth(err, &format!("softmax axis {axis}"));
    }
}

#[test]
fn layer_norm_with_affine() {
    let x = rand_tensor(&[3, 5], 15);
    let gain = rand_tensor(&[5], 16);
    let bias = rand_tensor(&[5], 17);
    let err = grad_check_many(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            probe(g, y, 20)
        },
        &[x, gain, bias],
        EPS,
    )
    .unwrap();
    smooth(err, "layer_norm");
}

#[test]
fn gather_with_repeats() {
    let table = rand_tensor(&[5, 3], 18);
    let err = grad_check(
        |g, t| {
            let y = g.gather(t, &[4, 0, 4, 2])?;
            probe(g, y, 21)
        },
        &table,
        EPS,
    )
    .unwrap();
    smooth(err, "gather");
}

#[test]
fn losses() {
    let z = rand_tensor(&[6], 19);
    let err = grad_check(|g, z| g.bce_with_logits(z, &[1.0, 0.0, 0.3, 1.0, 0.0, 0.5]), &z, EPS).unwrap();
    smooth(err, "bce_with_logits");
    let z = rand_tensor(&[4, 3], 20);
    let err = grad_check(|g, z| g.softmax_cross_entropy(z, &[0, 2, 1, 2]), &z, EPS).unwrap();
    smooth(err, "softmax_cross_entropy");
}

#[test]
fn dropout_gradient_follows_its_mask() {
    // The mask is drawn once per graph, so the same seed replays it.
    let x = rand_tensor(&[4, 4], 21);
    let mut g = Graph::new(true, 5);
    let v = g.input(x.clone());
    let y = g.dropout(v, 0.5).unwrap();
    let l = probe(&mut g, y, 22).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(v).unwrap().to_vec();
    let w = probe_weights(16, 22);
    let out = g.value(y).data().to_vec();
    for k in 0..16 {
        let m = out[k] / x.data()[k];
        assert!((grad[k] - w[k] * m).abs() < 1e-12);
    }
}

#[test]
fn layers_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new("lin", 4, 4, true);
    let ln = LayerNorm::new("ln", 4);
    let ffn = FeedForward::new("ffn", 4, 6, 4);
    let attn = SelfAttention::new("attn", 4, 2);
    lin.init(&mut store, &mut rng);
    ln.init(&mut store);
    ffn.init(&mut store, &mut rng);
    attn.init(&mut store, &mut rng);
    // move gain/bias off their trivial initial values
    for (k, v) in store.get_mut("ln.gain").unwrap().data_mut().iter_mut().enumerate() {
        *v = 1.0 + 0.1 * k as f64;
    }
    let x = away_from_zero(&[2, 3, 4], 23);
    let err = grad_check_params(
        |g, s| {
            let x = g.constant(x.clone());
            let h = lin.forward(g, s, x)?;
            let h = ln.forward(g, s, h)?;
            let h = attn.forward(g, s, h)?;
            let h = ffn.forward(g, s, h)?;
            probe(g, h, 24)
        },
        &store,
        EPS,
        1,
    )
    .unwrap();
    assert!(err < TOL, "layers: {err:e}");
}

#[test]
fn axial_block_end_to_end() {
    // tiny model: N = 4 nodes, T = 3 subsets, width 8
    let (n, t, d) = (4, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let cfg = AxialConfig { dim: d, heads: 2, ffn_mult: 2, dropout: 0.0 };
    let embed = Linear::new("embed", 3, d, true);
    let pool = SelfAttention::new("pool", d, 1);
    let block = AxialBlock::new("block", cfg);
    let head = Linear::new("head", d, 3, true);
    embed.init(&mut store, &mut rng);
    pool.init(&mut store, &mut rng);
    block.init(&mut store, &mut rng);
    head.init(&mut store, &mut rng);
    let x = rand_tensor(&[n * n, t, 3], 25);
    let labels: Vec<usize> = (0..n * n).map(|i| i % 3).collect();
    let err = grad_check_params(
        |g, s| {
            let x = g.constant(x.clone());
            let e = embed.forward(g, s, x)?;
            let e = pool.forward(g, s, e)?;
            let e = g.mean(e, 1)?;
            let h = g.reshape(e, &[n, n, d])?;
            let h = block.forward(g, s, h)?;
            let h = g.reshape(h, &[n * n, d])?;
            let z = head.forward(g, s, h)?;
            g.softmax_cross_entropy(z, &labels)
        },
        &store,
        EPS,
        1,
    )
    .unwrap();
    assert!(err < TOL, "axial end to end: {err:e}");
}

#[test]
fn negative_control_detects_a_wrong_gradient() {
    // Comparing the analytic gradient of tanh against numeric gradients of
    // sigmoid must fail loudly, so the checker is not vacuous.
    let x = rand_tensor(&[5], 26);
    let a = cdn_nn::gradcheck::analytic_gradients(
        &|g: &mut Graph<f64>, v: &[Var]| {
            let y = g.tanh(v[0])?;
            g.sum_all(y)
        },
        std::slice::from_ref(&x),
    )
    .unwrap();
    let n = cdn_nn::gradcheck::numeric_gradients(
        &|g: &mut Graph<f64>, v: &[Var]| {
            let y = g.sigmoid(v[0])?;
            g.sum_all(y)
        },
        std::slice::from_ref(&x),
        EPS,
    )
    .unwrap();
    let err = cdn_nn::gradcheck::max_relative_error(&a[0], &n[0]);
    assert!(err > 0.1, "negative control only reached {err:e}");
}

#[test]
fn affine_map_is_exact_up_to_rounding() {
    // central differences carry no truncation error on an affine function
    let x = rand_tensor(&[3, 5], 40);
    let w = rand_tensor(&[5, 2], 41);
    let b = rand_tensor(&[2], 42);
    let err = grad_check_many(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y, 43)
        },
        &[x, w, b],
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-10, "affine: {err:e}");
}

#[test]
fn attention_projection_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut store = ParamStore::<f64>::new();
    let attn = SelfAttention::new("attn", 6, 2);
    attn.init(&mut store, &mut rng);
    let x = rand_tensor(&[3, 4, 6], 45);
    let err = grad_check_params(
        |g, s| {
            let x = g.constant(x.clone());
            let y = attn.forward(g, s, x)?;
            probe(g, y, 46)
        },
        &store,
        EPS,
        1,
    )
    .unwrap();
    assert!(err < 1e-5, "attention: {err:e}");
}
