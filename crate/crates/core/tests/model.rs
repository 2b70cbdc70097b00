use std::sync::Arc;

use cdn_core::discovery::LocalEstimates;
use cdn_core::features::{featurize, FeatureSide, FeaturizeConfig};
use cdn_core::model::{
    edge_labels, edge_probabilities, load_checkpoint, predict_from_tokens, predict_targets, save_checkpoint, sigmoid,
    target_indicator, train, Cdn, Example, ModelConfig, SideTokens, TrainConfig, Variant,
};
use cdn_core::scm::{instantiate_scm, mutilate, sample_data, sample_er_dag, Family, MechanismConfig, Regime};
use cdn_nn::gradcheck::grad_check_params;
use cdn_nn::{Graph, NnError, ParamStore, Scalar, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn side(n: usize, m: usize, k: usize, t: usize, seed: u64) -> FeatureSide {
    let dag = sample_er_dag(n, n, seed).unwrap();
    let scm = instantiate_scm(&dag, Family::Linear, &MechanismConfig::default(), seed).unwrap();
    featurize(&sample_data(&scm, m, seed), &FeaturizeConfig { k, t, alpha: 0.05 }, seed).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        ffn_mult: 2,
        structure_layers: 2,
        features: FeaturizeConfig { k: 4, t: 12, alpha: 0.05 },
        ..Default::default()
    }
}

struct Run {
    target: Vec<f64>,
    edge_obs: Vec<f64>,
    edge_int: Vec<f64>,
    h_obs: Vec<f64>,
}

fn run<F: Scalar>(model: &Cdn, store: &ParamStore<F>, obs: &SideTokens, int: &SideTokens, perm: &[usize]) -> Run {
    let mut g = Graph::new(false, 0);
    let out = model.forward(&mut g, store, obs, int, perm).unwrap();
    Run {
        target: g.value(out.target).to_f64_vec(),
        edge_obs: g.value(out.edge_obs).to_f64_vec(),
        edge_int: g.value(out.edge_int).to_f64_vec(),
        h_obs: g.value(out.h_obs).to_f64_vec(),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn compressed_tokens_match_dense_expansion() {
    let model = Cdn::new(small_config()).unwrap();
    let store = model.init::<f64>(1);
    let (a, b) = (side(6, 300, 4, 12, 1), side(6, 300, 4, 12, 2));
    let dense = (SideTokens::new(&a, false), SideTokens::new(&b, false));
    let packed = (SideTokens::new(&a, true), SideTokens::new(&b, true));
    assert_eq!(dense.0.len, 13);
    assert!(packed.0.len < dense.0.len);
    let perm = [3, 9, 0, 41, 7, 2];
    let x = run(&model, &store, &dense.0, &dense.1, &perm);
    let y = run(&model, &store, &packed.0, &packed.1, &perm);
    assert!(max_diff(&x.h_obs, &y.h_obs) < 1e-10);
    assert!(max_diff(&x.edge_obs, &y.edge_obs) < 1e-10);
    assert!(max_diff(&x.target, &y.target) < 1e-10);
}

fn relabel(s: &FeatureSide, pi: &[usize]) -> FeatureSide {
    let n = s.n();
    let mut rho = DMatrix::zeros(n, n);
    let mut mean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    for i in 0..n {
        mean[pi[i]] = s.mean[i];
        var[pi[i]] = s.var[i];
        for j in 0..n {
            rho[(pi[i], pi[j])] = s.rho[(i, j)];
        }
    }
    FeatureSide {
        alpha: s.alpha,
        rho,
        mean,
        var,
        local: LocalEstimates {
            n,
            k: s.local.k,
            subsets: s.local.subsets.iter().map(|x| x.iter().map(|&v| pi[v]).collect()).collect(),
            pags: s.local.pags.clone(),
        },
    }
}

fn pair_slot(n: usize, i: usize, j: usize) -> usize {
    (0..i).map(|r| n - 1 - r).sum::<usize>() + (j - i - 1)
}

/// Largest deviation between the outputs on relabeled inputs and the
/// relabeled outputs.
fn equivariance_error(model: &Cdn, store: &ParamStore<f32>, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (side(n, 200, 4, 12, seed), side(n, 200, 4, 12, seed + 1000));
    let mut pi: Vec<usize> = (0..n).collect();
    pi.shuffle(&mut rng);
    let perm = rand::seq::index::sample(&mut rng, model.config.n_max, n).into_vec();
    let mut perm2 = vec![0; n];
    for i in 0..n {
        perm2[pi[i]] = perm[i];
    }
    let x = run(model, store, &SideTokens::new(&a, true), &SideTokens::new(&b, true), &perm);
    let y = run(
        model,
        store,
        &SideTokens::new(&relabel(&a, &pi), true),
        &SideTokens::new(&relabel(&b, &pi), true),
        &perm2,
    );
    let mut err = 0.0f64;
    for i in 0..n {
        err = err.max((sigmoid(x.target[i]) - sigmoid(y.target[pi[i]])).abs());
    }
    for (ex, ey) in [(&x.edge_obs, &y.edge_obs), (&x.edge_int, &y.edge_int)] {
        let (px, py) = (edge_probabilities(ex), edge_probabilities(ey));
        for i in 0..n {
            for j in i + 1..n {
                let p = px[pair_slot(n, i, j)];
                let (u, v) = (pi[i], pi[j]);
                let q = if u < v {
                    py[pair_slot(n, u, v)]
                } else {
                    let q = py[pair_slot(n, v, u)];
                    [q[1], q[0], q[2]]
                };
                for c in 0..3 {
                    err = err.max((p[c] - q[c]).abs());
                }
            }
        }
    }
    err
}

#[test]
fn relabeling_nodes_permutes_every_output() {
    let model = Cdn::new(ModelConfig {
        heads: 2,
        ..Default::default()
    })
    .unwrap();
    let store = model.init::<f32>(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let n = rng.gen_range(4..9);
        let err = equivariance_error(&model, &store, n, 100 + case);
        assert!(err < 1e-4, "case {case} (N={n}): deviation {err:e}");
    }
}

#[test]
fn output_contract_on_an_untrained_model() {
    let model = Cdn::new(small_config()).unwrap();
    let store = model.init::<f32>(4);
    let (a, b) = (SideTokens::new(&side(7, 200, 4, 12, 4), true), SideTokens::new(&side(7, 200, 4, 12, 5), true));
    let r = run(&model, &store, &a, &b, &[0, 1, 2, 3, 4, 5, 6]);
    assert_eq!(r.target.len(), 7);
    assert_eq!(r.edge_obs.len(), 21 * 3);
    assert!(r.target.iter().all(|z| z.is_finite() && sigmoid(*z) > 0.0 && sigmoid(*z) < 1.0));
    for p in edge_probabilities(&r.edge_int) {
        assert!(((p[0] + p[1] + p[2]) - 1.0).abs() < 1e-6);
    }
    // swapping the sides is not a symmetry
    let s = run(&model, &store, &b, &a, &[0, 1, 2, 3, 4, 5, 6]);
    assert!(max_diff(&r.target, &s.target) > 1e-6);
    // permutations must be injective and in range
    let mut g = Graph::<f32>::new(false, 0);
    assert!(model.forward(&mut g, &store, &a, &b, &[0, 1, 2, 3, 4, 5, 5]).is_err());
    assert!(model.forward(&mut g, &store, &a, &b, &[0, 1, 2, 3, 4, 5, 128]).is_err());
    assert!(model.forward(&mut g, &store, &a, &b, &[0, 1, 2]).is_err());
}

#[test]
fn identical_sides_give_node_independent_logits_in_the_diff_variant() {
    let model = Cdn::new(small_config()).unwrap();
    let store = model.init::<f64>(6);
    let a = SideTokens::new(&side(6, 300, 4, 12, 6), true);
    let mut g = Graph::new(false, 0);
    let pair = model.pair_embedding(&mut g, &store, &[5, 1, 9, 2, 7, 3]).unwrap();
    let (h, _) = model.structure(&mut g, &store, &a, pair).unwrap();
    let z = model.compare(&mut g, &store, h, h, &a.moments, &a.moments).unwrap();
    let z = g.value(z).to_f64_vec();
    assert!(z.iter().all(|v| (v - z[0]).abs() < 1e-5), "{z:?}");
}

#[test]
fn loss_values_at_reference_points() {
    let model = Cdn::new(small_config()).unwrap();
    let mut g = Graph::<f64>::new(false, 0);
    let n = 5;
    let p = n * (n - 1) / 2;
    let zeros = |g: &mut Graph<f64>, shape: &[usize]| g.constant(Tensor::zeros(shape));
    let out = cdn_core::model::Output {
        edge_obs: zeros(&mut g, &[p, 3]),
        edge_int: zeros(&mut g, &[p, 3]),
        target: zeros(&mut g, &[n]),
        h_obs: zeros(&mut g, &[n, n, 1]),
        h_int: zeros(&mut g, &[n, n, 1]),
    };
    let labels: Vec<usize> = (0..p).map(|k| k % 3).collect();
    let (lg, li, l) = model.losses(&mut g, &out, &labels, &labels, &target_indicator(n, &[2])).unwrap();
    let (lg, li, l) = (g.value(lg).item(), g.value(li).item(), g.value(l).item());
    assert!((lg - 2.0 * 3f64.ln()).abs() < 1e-12);
    assert!((li - 2f64.ln()).abs() < 1e-12);
    assert_eq!(l, lg + li);

    // confident correct logits drive both terms to zero
    let onehot: Vec<f64> = labels.iter().flat_map(|&c| (0..3).map(move |k| if k == c { 40.0 } else { -40.0 })).collect();
    let edge = g.constant(Tensor::from_f64(&[p, 3], &onehot).unwrap());
    let target = g.constant(Tensor::from_f64(&[n], &[-40.0, -40.0, 40.0, -40.0, -40.0]).unwrap());
    let sure = cdn_core::model::Output {
        edge_obs: edge,
        edge_int: edge,
        target,
        ..out
    };
    let (lg, li, _) = model.losses(&mut g, &sure, &labels, &labels, &target_indicator(n, &[2])).unwrap();
    assert!(g.value(lg).item() < 1e-12 && g.value(li).item() < 1e-12);
}

#[test]
fn end_to_end_gradient_check() {
    let (n, t) = (4, 3);
    let config = ModelConfig {
        dim: 8,
        heads: 2,
        ffn_mult: 2,
        structure_layers: 1,
        diff_layers: Some(1),
        dropout: 0.0,
        features: FeaturizeConfig { k: 3, t, alpha: 0.05 },
        ..Default::default()
    };
    for variant in [Variant::Diff, Variant::Cat] {
        let model = Cdn::new(ModelConfig {
            variant,
            ..config.clone()
        })
        .unwrap();
        let store = model.init::<f64>(7);
        let a = SideTokens::new(&side(n, 200, 3, t, 7), true);
        let b = SideTokens::new(&side(n, 200, 3, t, 8), true);
        let labels_a: Vec<usize> = vec![0, 2, 1, 2, 2, 0];
        let labels_b: Vec<usize> = vec![2, 2, 1, 0, 2, 0];
        let targets = target_indicator(n, &[1]);
        let err = grad_check_params(
            |g, s| {
                let fail = |e: cdn_core::CoreError| NnError::Invalid(e.to_string());
                let out = model.forward(g, s, &a, &b, &[2, 0, 5, 1]).map_err(fail)?;
                let (_, _, l) = model.losses(g, &out, &labels_a, &labels_b, &targets).map_err(fail)?;
                Ok(l)
            },
            &store,
            1e-6,
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "{variant:?}: max relative error {err:e}");
    }
}

fn toy_examples(count: usize, config: &ModelConfig, seed: u64) -> Vec<Example> {
    (0..count as u64)
        .map(|s| {
            let seed = seed + s;
            let dag = sample_er_dag(6, 6, seed).unwrap();
            let scm = instantiate_scm(&dag, Family::Linear, &MechanismConfig::default(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = rng.gen_range(0..6);
            let regime = Regime::sample(vec![target], cdn_core::scm::InterventionKind::Hard, &mut rng).unwrap();
            let (int_scm, g_int) = mutilate(&scm, &regime).unwrap();
            let f = &config.features;
            let obs = featurize(&sample_data(&scm, 400, seed), f, seed).unwrap();
            let int = featurize(&sample_data(&int_scm, 400, seed + 1), f, seed + 1).unwrap();
            Example {
                dataset: s as usize,
                regime: 0,
                obs: Arc::new(SideTokens::new(&obs, true)),
                int: SideTokens::new(&int, true),
                labels_obs: Arc::new(edge_labels(&dag)),
                labels_int: edge_labels(&g_int),
                targets: vec![target],
            }
        })
        .collect()
}

#[test]
fn training_can_overfit_a_small_set() {
    let config = ModelConfig {
        dim: 32,
        dropout: 0.0,
        features: FeaturizeConfig { k: 4, t: 20, alpha: 0.05 },
        ..Default::default()
    };
    let model = Cdn::new(config.clone()).unwrap();
    let examples = toy_examples(8, &config, 40);
    let tc = TrainConfig {
        max_epochs: 200,
        batch_size: 8,
        lr: 1e-3,
        patience: 1000,
        ..Default::default()
    };
    let trained = train(&model, model.init(9), &examples, &examples, &tc, 9, |_, _| {}).unwrap();
    let last = trained.log.last().unwrap();
    assert_eq!(trained.log.len(), 200);
    assert!(last.loss_target < 0.05, "final L_I {}", last.loss_target);
    assert!(trained.best_val_map >= trained.log[0].val_map);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let config = ModelConfig {
        dim: 16,
        features: FeaturizeConfig { k: 4, t: 10, alpha: 0.05 },
        ..Default::default()
    };
    let model = Cdn::new(config.clone()).unwrap();
    let examples = toy_examples(6, &config, 70);
    let tc = TrainConfig {
        max_epochs: 3,
        batch_size: 4,
        ..Default::default()
    };
    let a = train(&model, model.init(2), &examples[..4], &examples[4..], &tc, 2, |_, _| {}).unwrap();
    let b = train(&model, model.init(2), &examples[..4], &examples[4..], &tc, 2, |_, _| {}).unwrap();
    let strip = |t: &cdn_core::model::Trained| -> Vec<_> {
        t.log.iter().map(|r| (r.epoch, r.loss_graph, r.loss_target, r.val_map, r.val_auc)).collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert!(a.store.iter().zip(b.store.iter()).all(|(x, y)| x == y));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &a.store, None, a.steps, serde_json::json!({"note": "test"})).unwrap();
    let (loaded, store, header) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, config);
    assert_eq!(header.step, a.steps);
    let ex = &examples[0];
    let p = predict_from_tokens(&model, &a.store, &ex.obs, &ex.int, 11, 4).unwrap();
    let q = predict_from_tokens(&loaded, &store, &ex.obs, &ex.int, 11, 4).unwrap();
    assert_eq!(p, q);
}

#[test]
fn prediction_from_raw_data() {
    let config = small_config();
    let model = Cdn::new(config).unwrap();
    let store = model.init::<f32>(12);
    let dag = sample_er_dag(6, 6, 12).unwrap();
    let scm = instantiate_scm(&dag, Family::Linear, &MechanismConfig::default(), 12).unwrap();
    let obs = sample_data(&scm, 300, 1);
    let int = sample_data(&scm, 300, 2);
    let p = predict_targets(&model, &store, &obs, &int, 3, 4).unwrap();
    assert_eq!(p, predict_targets(&model, &store, &obs, &int, 3, 4).unwrap());
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    let small = Cdn::new(ModelConfig {
        n_max: 4,
        ..small_config()
    })
    .unwrap();
    assert!(predict_targets(&small, &small.init(0), &obs, &int, 3, 1).is_err());
}
