use cdn_core::scm::{instantiate_scm, sample_data, sample_er_dag, Family, MechanismConfig};
use cdn_core::stats::{
    benjamini_hochberg, fisher_z_test, gaussian_cmi, graphical_lasso, log_fold_change, markov_boundary,
    partial_correlation, rank_sum_test, stack_with_domain, summary_stats, wilcoxon_bh, GlassoConfig,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
}

/// Residual of `y` after least-squares regression on the columns `s`
/// (with intercept).
fn residual(d: &DMatrix<f64>, y: usize, s: &[usize]) -> Vec<f64> {
    let m = d.nrows();
    let x = DMatrix::from_fn(m, s.len() + 1, |r, c| if c == 0 { 1.0 } else { d[(r, s[c - 1])] });
    let target = d.column(y).into_owned();
    let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &target;
    (target - x * beta).iter().copied().collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partial_correlation_matches_regression_residuals(seed in any::<u64>(), ssize in 0usize..4) {
        // correlated columns so the conditioning matters
        let z = gaussian(300, 6, seed);
        let mix = gaussian(6, 6, seed ^ 1);
        let d = z * mix;
        let s: Vec<usize> = (2..2 + ssize).collect();
        let st = summary_stats(&d).unwrap();
        let r = partial_correlation(&st.rho, 0, 1, &s).unwrap();
        let want = pearson(&residual(&d, 0, &s), &residual(&d, 1, &s));
        prop_assert!((r - want).abs() < 1e-10, "{} vs {}", r, want);
    }

    #[test]
    fn bh_bounds_and_order(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let adj = benjamini_hochberg(&p);
        for i in 0..p.len() {
            prop_assert!(adj[i] >= p[i] && adj[i] <= 1.0);
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(adj[i] <= adj[j]);
                }
            }
        }
    }

    #[test]
    fn correlation_is_scale_invariant(seed in any::<u64>(), scales in prop::collection::vec(1e-3f64..1e3, 5)) {
        let d = gaussian(50, 5, seed) * gaussian(5, 5, seed ^ 7);
        let scaled = DMatrix::from_fn(50, 5, |r, c| d[(r, c)] * scales[c]);
        let a = summary_stats(&d).unwrap();
        let b = summary_stats(&scaled).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                prop_assert!((a.rho[(i, j)] - b.rho[(i, j)]).abs() <= 1e-12);
                let want = a.cov[(i, j)] * scales[i] * scales[j];
                prop_assert!((b.cov[(i, j)] - want).abs() <= 1e-9 * want.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn glasso_dual_objective_never_increases(seed in any::<u64>(), lambda in 0.01f64..0.5) {
        let d = gaussian(80, 6, seed) * gaussian(6, 6, seed ^ 3);
        let st = summary_stats(&d).unwrap();
        let fit = graphical_lasso(&st.rho, &GlassoConfig { lambda, ..Default::default() }).unwrap();
        for w in fit.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.objective);
        }
    }
}

#[test]
fn fisher_z_null_calibration() {
    let passes = (0..100)
        .filter(|&s| fisher_z_test(&gaussian(10_000, 2, s), 0, 1, &[], 0.05).unwrap().p_value > 0.05)
        .count();
    assert!(passes >= 90, "{passes} of 100 null tests kept independence");
}

#[test]
fn fisher_z_identical_columns_are_dependent() {
    let x = gaussian(500, 1, 3);
    let d = DMatrix::from_fn(500, 2, |r, _| x[(r, 0)]);
    let t = fisher_z_test(&d, 0, 1, &[], 0.05).unwrap();
    assert!(!t.independent && t.p_value < 1e-12);
    assert!(fisher_z_test(&d, 0, 0, &[], 0.05).is_err());
}

#[test]
fn fisher_z_singular_conditioning_is_flagged() {
    let x = gaussian(500, 3, 4);
    // column 3 duplicates column 2, so {2, 3} is singular
    let d = DMatrix::from_fn(500, 4, |r, c| x[(r, c.min(2))]);
    let t = fisher_z_test(&d, 0, 1, &[2, 3], 0.05).unwrap();
    assert!(t.degenerate && !t.independent && t.p_value == 0.0);
}

#[test]
fn collider_is_marginally_independent_but_conditionally_dependent() {
    let e = gaussian(10_000, 3, 9);
    let d = DMatrix::from_fn(10_000, 3, |r, c| match c {
        2 => e[(r, 0)] + e[(r, 1)] + 0.5 * e[(r, 2)],
        _ => e[(r, c)],
    });
    assert!(fisher_z_test(&d, 0, 1, &[], 0.05).unwrap().independent);
    assert!(!fisher_z_test(&d, 0, 1, &[2], 0.05).unwrap().independent);
}

#[test]
fn cmi_bias_and_sentinel() {
    let m = 10_000;
    let c = gaussian_cmi(&gaussian(m, 3, 5), 0, 1, &[2]).unwrap();
    assert!(c.value >= 0.0 && c.value <= 3.0 / m as f64, "{}", c.value);
    let x = gaussian(100, 1, 6);
    let d = DMatrix::from_fn(100, 2, |r, _| x[(r, 0)]);
    assert!(gaussian_cmi(&d, 0, 1, &[]).unwrap().value.is_infinite());
}

/// Two-sided permutation p-value of the rank sum by full enumeration.
fn brute_rank_sum_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let rank = |v: f64| {
        let less = pooled.iter().filter(|&&x| x < v).count() as f64;
        let eq = pooled.iter().filter(|&&x| x == v).count() as f64;
        less + (eq + 1.0) / 2.0
    };
    let ranks: Vec<f64> = pooled.iter().map(|&v| rank(v)).collect();
    let w: f64 = ranks[..a.len()].iter().sum();
    let (mut lo, mut hi, mut all) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        all += 1;
        if s <= w + 1e-9 {
            lo += 1;
        }
        if s >= w - 1e-9 {
            hi += 1;
        }
    }
    (2.0 * lo.min(hi) as f64 / all as f64).min(1.0)
}

#[test]
fn exact_rank_sum_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let n1 = rng.gen_range(1..8);
        let n2 = rng.gen_range(1..8);
        // coarse values force ties
        let a: Vec<f64> = (0..n1).map(|_| rng.gen_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.gen_range(0..6) as f64 + 0.5 * rng.gen_range(0..2) as f64).collect();
        let (_, p) = rank_sum_test(&a, &b).unwrap();
        let want = brute_rank_sum_p(&a, &b);
        assert!((p - want).abs() < 1e-12, "{a:?} {b:?}: {p} vs {want}");
    }
}

#[test]
fn rank_sum_identical_and_shifted_columns() {
    let obs = gaussian(200, 5, 1);
    let same = wilcoxon_bh(&obs, &obs).unwrap();
    assert!(same.adjusted.iter().all(|&p| p > 0.99));
    let mut int = gaussian(200, 5, 2);
    int.column_mut(3).add_scalar_mut(5.0);
    let r = wilcoxon_bh(&obs, &int).unwrap();
    assert!(r.adjusted[3] < 1e-6);
    assert!(wilcoxon_bh(&DMatrix::zeros(0, 5), &int).is_err());
}

#[test]
fn markov_boundary_null_rate() {
    let config = GlassoConfig {
        lambda: 0.1,
        ..Default::default()
    };
    let clean = (0..50)
        .filter(|&s| {
            let obs = gaussian(5000, 8, 100 + s);
            let int = gaussian(5000, 8, 200 + s);
            markov_boundary(&stack_with_domain(&obs, &int).unwrap(), &config).unwrap().len() <= 1
        })
        .count();
    assert!(clean >= 45, "{clean} of 50 null boundaries had at most one index");
}

#[test]
fn markov_boundary_finds_a_shifted_variable() {
    let obs = gaussian(2000, 6, 1);
    let mut int = gaussian(2000, 6, 2);
    int.column_mut(4).add_scalar_mut(3.0);
    let joint = stack_with_domain(&obs, &int).unwrap();
    let mb = markov_boundary(&joint, &GlassoConfig::default()).unwrap();
    assert!(mb.contains(&4), "{mb:?}");
    let huge = GlassoConfig {
        lambda: 100.0,
        ..Default::default()
    };
    assert!(markov_boundary(&joint, &huge).unwrap().is_empty());
}

#[test]
fn fold_change_properties() {
    let obs = gaussian(1000, 4, 1);
    assert!(log_fold_change(&obs, &obs).unwrap().iter().all(|&v| v == 0.0));
    let dag = sample_er_dag(4, 3, 1).unwrap();
    let scm = instantiate_scm(&dag, Family::Linear, &MechanismConfig::default(), 1).unwrap();
    let a = sample_data(&scm, 50_000, 1);
    let mut b = sample_data(&scm, 50_000, 2);
    b.column_mut(2).add_scalar_mut(3.0);
    let lfc = log_fold_change(&a, &b).unwrap();
    assert!((lfc[2] - 3.0).abs() < 0.05);
    let back = log_fold_change(&b, &a).unwrap();
    assert_eq!(lfc, -back);
}
