use cdn_core::baselines::{
    analytic_hard_detector, analytic_soft_detector, baseline_scores, default_soft_thresholds, dge_scores, mb_ci_scores,
    BaselineMethod, SoftThresholds,
};
use cdn_core::scm::{
    instantiate_scm, mutilate, sample_data, sample_er_dag, Dag, Family, InterventionKind, MechanismConfig, Regime,
};
use cdn_core::stats::{markov_boundary, stack_with_domain, summary_stats, wilcoxon_bh, GlassoConfig, SummaryStats};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn population(cov: DMatrix<f64>) -> SummaryStats {
    let n = cov.nrows();
    let rho = cdn_core::stats::correlation_from_cov(&cov);
    SummaryStats {
        m: usize::MAX,
        mean: DVector::zeros(n),
        var: cov.diagonal(),
        cov,
        rho,
    }
}

#[test]
fn hard_detector_equals_in_degree_change() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in 0..50 {
        let n = rng.gen_range(4..12);
        let dag = sample_er_dag(n, n, s).unwrap();
        let k = rng.gen_range(1..4);
        let targets: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let g_int = dag.without_incoming(&targets);
        let scores = analytic_hard_detector(&dag.adjacency(), &g_int.adjacency(), n).unwrap().scores;
        for v in 0..n {
            let expected = if targets.contains(&v) { dag.parents(v).len() } else { 0 };
            assert_eq!(scores[v], expected as f64);
        }
    }
}

#[test]
fn soft_detector_closed_form_chain() {
    // x → y with y = 0.8x + e and unit variances; x is scaled by c = 2.
    let obs = population(DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.64]));
    let int = population(DMatrix::from_row_slice(2, 2, &[4.0, 1.6, 1.6, 3.56]));
    let th = SoftThresholds {
        eps_r: 1e-6,
        eps_s: DMatrix::from_element(2, 2, 1e-6),
    };
    // ΔΣ = [3, 0.8; 0.8, 1.92]; ΔR_xy = 0.8/√1.64 − 1.6/√14.24 ≠ 0, ΔR_ii = 0
    let dr = (int.rho[(0, 1)] - obs.rho[(0, 1)]).abs();
    assert!((dr - (0.8 / 1.64f64.sqrt() - 1.6 / 14.24f64.sqrt())).abs() < 1e-15);
    let s = analytic_soft_detector(&obs, &int, &th).unwrap();
    assert_eq!(s.scores, vec![1.0, 1.0]);

    assert_eq!(analytic_soft_detector(&obs, &obs, &th).unwrap().scores, vec![0.0, 0.0]);
    let inf = SoftThresholds {
        eps_r: 1e-6,
        eps_s: DMatrix::from_element(2, 2, f64::INFINITY),
    };
    assert_eq!(analytic_soft_detector(&obs, &int, &inf).unwrap().scores, vec![0.0, 0.0]);
    let zero = SoftThresholds {
        eps_r: 0.0,
        eps_s: DMatrix::from_element(2, 2, 1.0),
    };
    assert!(analytic_soft_detector(&obs, &int, &zero).is_err());
}

fn linear_pair(n: usize, kind: InterventionKind, targets: Vec<usize>, m: (usize, usize), seed: u64) -> (Dag, DMatrix<f64>, DMatrix<f64>) {
    let dag = sample_er_dag(n, n, seed).unwrap();
    let scm = instantiate_scm(&dag, Family::Linear, &MechanismConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regime = Regime::sample(targets, kind, &mut rng).unwrap();
    let (int_scm, _) = mutilate(&scm, &regime).unwrap();
    (dag, sample_data(&scm, m.0, seed + 1), sample_data(&int_scm, m.1, seed + 2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn soft_detector_is_invariant_to_column_rescaling(seed in 0u64..1000, scales in proptest::collection::vec(0.1f64..10.0, 6)) {
        let (_, obs, int) = linear_pair(6, InterventionKind::Scale, vec![(seed % 6) as usize], (400, 300), seed);
        let c = DVector::from_vec(scales);
        let rescale = |d: &DMatrix<f64>| DMatrix::from_fn(d.nrows(), d.ncols(), |r, j| d[(r, j)] * c[j]);
        let (so, si) = (summary_stats(&obs).unwrap(), summary_stats(&int).unwrap());
        let (to, ti) = (summary_stats(&rescale(&obs)).unwrap(), summary_stats(&rescale(&int)).unwrap());
        for i in 0..6 {
            for j in 0..6 {
                let dr = si.rho[(i, j)] - so.rho[(i, j)];
                let dr2 = ti.rho[(i, j)] - to.rho[(i, j)];
                prop_assert!((dr - dr2).abs() < 1e-12);
                let ds = si.cov[(i, j)] - so.cov[(i, j)];
                let ds2 = ti.cov[(i, j)] - to.cov[(i, j)];
                prop_assert!((ds2 - c[i] * c[j] * ds).abs() <= 1e-9 * (1.0 + ds2.abs()));
            }
        }
        let th = default_soft_thresholds(&obs, &int, seed).unwrap();
        let scaled = SoftThresholds {
            eps_r: th.eps_r,
            eps_s: DMatrix::from_fn(6, 6, |i, j| th.eps_s[(i, j)] * c[i] * c[j]),
        };
        let a = analytic_soft_detector(&so, &si, &th).unwrap().scores;
        let b = analytic_soft_detector(&to, &ti, &scaled).unwrap().scores;
        let argmax = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(argmax(&a), argmax(&b));
        // away from threshold boundaries the counts agree entirely
        let margin = (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).all(|(i, j)| {
            let ds = (si.cov[(i, j)] - so.cov[(i, j)]).abs();
            (ds - th.eps_s[(i, j)]).abs() > 1e-9 * ds.max(1.0)
        });
        if margin {
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn default_thresholds_follow_sample_size() {
    let (_, obs, int) = linear_pair(5, InterventionKind::Scale, vec![2], (900, 400), 3);
    let th = default_soft_thresholds(&obs, &int, 3).unwrap();
    assert_eq!(th.eps_r, 3.0 / 400f64.sqrt());
    assert!(th.eps_s.iter().all(|&e| e > 0.0 && e.is_finite()));
    assert_eq!(th.eps_s, th.eps_s.transpose());
    assert_eq!(th, default_soft_thresholds(&obs, &int, 3).unwrap());
}

#[test]
fn mb_ci_boundary_is_symmetric_under_label_flip() {
    for seed in 0..10 {
        let (_, obs, int) = linear_pair(8, InterventionKind::Shift, vec![(seed % 8) as usize], (600, 300), 10 + seed);
        let cfg = GlassoConfig::default();
        let a = markov_boundary(&stack_with_domain(&obs, &int).unwrap(), &cfg).unwrap();
        let b = markov_boundary(&stack_with_domain(&int, &obs).unwrap(), &cfg).unwrap();
        assert_eq!(a, b, "seed {seed}");
        let sa = mb_ci_scores(&obs, &int, &cfg).unwrap().scores;
        let sb = mb_ci_scores(&int, &obs, &cfg).unwrap().scores;
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn mb_ci_finds_a_shifted_root() {
    let mut top = 0;
    let trials = 50;
    for seed in 0..trials {
        let dag = sample_er_dag(10, 10, 100 + seed).unwrap();
        let roots: Vec<usize> = (0..10).filter(|&v| dag.parents(v).is_empty()).collect();
        let root = roots[(seed as usize) % roots.len()];
        let scm = instantiate_scm(&dag, Family::Linear, &MechanismConfig::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regime = Regime::sample(vec![root], InterventionKind::Shift, &mut rng).unwrap();
        let (int_scm, _) = mutilate(&scm, &regime).unwrap();
        let obs = sample_data(&scm, 1000, 2 * seed);
        let int = sample_data(&int_scm, 500, 2 * seed + 1);
        let s = mb_ci_scores(&obs, &int, &GlassoConfig::default()).unwrap().scores;
        if (0..10).all(|v| v == root || s[v] < s[root]) {
            top += 1;
        }
    }
    assert!(top * 100 >= 80 * trials, "root ranked first in {top}/{trials}");
}

#[test]
fn mb_ci_null_and_heavy_penalty() {
    let dag = sample_er_dag(8, 8, 5).unwrap();
    let scm = instantiate_scm(&dag, Family::Linear, &MechanismConfig::default(), 5).unwrap();
    let obs = sample_data(&scm, 1000, 1);
    let int = sample_data(&scm, 500, 2);
    let s = mb_ci_scores(&obs, &int, &GlassoConfig::default()).unwrap().scores;
    // plug-in CMI bias is of order |B|/(2M); a loose multiple of it
    assert!(s.iter().all(|&v| (0.0..0.02).contains(&v)), "{s:?}");

    let (_, obs, int) = linear_pair(8, InterventionKind::Shift, vec![0], (1000, 500), 6);
    let heavy = GlassoConfig {
        lambda: 1e3,
        ..Default::default()
    };
    assert_eq!(mb_ci_scores(&obs, &int, &heavy).unwrap().scores, vec![0.0; 8]);
}

#[test]
fn dge_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = DMatrix::from_fn(200, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = dge_scores(&obs, &obs).unwrap().scores;
    assert!(s.iter().all(|&v| v.abs() < 1e-9), "{s:?}");

    let mut int = DMatrix::from_fn(150, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
    int.column_mut(4).add_scalar_mut(1.0);
    let s = dge_scores(&obs, &int).unwrap().scores;
    assert!((0..6).all(|v| v == 4 || s[v] < s[4]), "{s:?}");

    // strictly smaller adjusted p-values always score higher
    let p = wilcoxon_bh(&obs, &int).unwrap().adjusted;
    for i in 0..6 {
        for j in 0..6 {
            if p[i] < p[j] {
                assert!(s[i] > s[j]);
            }
        }
    }
    let via = baseline_scores(BaselineMethod::Dge, &obs, &int, None, &GlassoConfig::default(), 0).unwrap();
    assert_eq!(via.scores, s);
    assert_eq!(via.method, "dge");
}

#[test]
fn scores_csv_and_dispatch() {
    let (dag, obs, int) = linear_pair(5, InterventionKind::Hard, vec![3], (300, 200), 9);
    let g_int = dag.without_incoming(&[3]);
    let hard = baseline_scores(
        BaselineMethod::AnalyticHard,
        &obs,
        &int,
        Some((&dag.adjacency(), &g_int.adjacency())),
        &GlassoConfig::default(),
        0,
    )
    .unwrap();
    assert_eq!(hard.scores[3], dag.parents(3).len() as f64);
    assert!(baseline_scores(BaselineMethod::AnalyticHard, &obs, &int, None, &GlassoConfig::default(), 0).is_err());
    let csv = hard.to_csv();
    assert!(csv.starts_with("node_index,score\n0,"));
    assert_eq!(csv.lines().count(), 6);
    for m in BaselineMethod::ALL {
        assert_eq!(BaselineMethod::parse(m.name()), Some(m));
    }
    assert_eq!(BaselineMethod::parse("gears"), None);
}
