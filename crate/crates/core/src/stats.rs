//! Summary statistics and classical tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{param, CoreError, Result};

/// Sample moments of a data matrix (rows are samples).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryStats {
    pub m: usize,
    pub mean: DVector<f64>,
    /// Unbiased variances.
    pub var: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Pearson correlation; zero off the diagonal for constant columns.
    pub rho: DMatrix<f64>,
}

pub fn summary_stats(d: &DMatrix<f64>) -> Result<SummaryStats> {
    let (m, n) = d.shape();
    if m < 2 {
        return param(format!("summary statistics need at least 2 rows, got {m}"));
    }
    let mean = DVector::from_iterator(n, d.column_iter().map(|c| c.sum() / m as f64));
    let mut centered = d.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = (centered.transpose() * &centered) / (m as f64 - 1.0);
    let var = cov.diagonal();
    let rho = correlation_from_cov(&cov);
    Ok(SummaryStats {
        m,
        mean,
        var,
        cov,
        rho,
    })
}

/// `cov_ij / √(cov_ii·cov_jj)` with a unit diagonal; constant columns get
/// zero correlation with everything else.
pub fn correlation_from_cov(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 1.0;
        }
        let denom = (cov[(i, i)] * cov[(j, j)]).sqrt();
        if denom > 0.0 {
            (cov[(i, j)] / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    })
}

/// Partial correlation of `i` and `j` given `s`, read off the inverse of the
/// correlation submatrix. `None` when that submatrix is singular.
pub fn partial_correlation(rho: &DMatrix<f64>, i: usize, j: usize, s: &[usize]) -> Option<f64> {
    if s.is_empty() {
        return Some(rho[(i, j)]);
    }
    let idx: Vec<usize> = [i, j].iter().chain(s).copied().collect();
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |a, b| rho[(idx[a], idx[b])]);
    let p = sub.cholesky()?.inverse();
    let denom = p[(0, 0)] * p[(1, 1)];
    if !(denom > 0.0) || !denom.is_finite() {
        return None;
    }
    let r = -p[(0, 1)] / denom.sqrt();
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub independent: bool,
    /// Set when the conditioning set was singular; the test then reports
    /// dependence with `p = 0`.
    pub degenerate: bool,
}

/// Two-sided standard normal tail `P(|Z| > |z|)`.
pub fn normal_two_sided(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Fisher z test on a precomputed correlation matrix from `m` samples.
pub fn fisher_z_from_rho(rho: &DMatrix<f64>, m: usize, i: usize, j: usize, s: &[usize], alpha: f64) -> CiTestResult {
    match partial_correlation(rho, i, j, s) {
        None => CiTestResult {
            statistic: f64::INFINITY,
            p_value: 0.0,
            independent: false,
            degenerate: true,
        },
        Some(r) => {
            let dof = m as f64 - s.len() as f64 - 3.0;
            let z = dof.max(0.0).sqrt() * r.atanh();
            let p = if z.is_nan() { 0.0 } else { normal_two_sided(z) };
            CiTestResult {
                statistic: z,
                p_value: p,
                independent: p > alpha,
                degenerate: false,
            }
        }
    }
}

fn check_ci_args(n: usize, m: usize, i: usize, j: usize, s: &[usize]) -> Result<()> {
    if i == j || i >= n || j >= n || s.iter().any(|&v| v >= n || v == i || v == j) {
        return param(format!("invalid CI query {i} ⊥ {j} | {s:?} on {n} variables"));
    }
    if s.len() + 4 > m {
        return param(format!("conditioning set of {} needs more than {m} samples", s.len()));
    }
    Ok(())
}

pub fn fisher_z_test(d: &DMatrix<f64>, i: usize, j: usize, s: &[usize], alpha: f64) -> Result<CiTestResult> {
    check_ci_args(d.ncols(), d.nrows(), i, j, s)?;
    let st = summary_stats(d)?;
    Ok(fisher_z_from_rho(&st.rho, st.m, i, j, s, alpha))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cmi {
    /// Nats; `+∞` when degenerate or perfectly dependent.
    pub value: f64,
    pub degenerate: bool,
}

/// Gaussian plug-in `−½·ln(1 − r²)` from a correlation matrix.
pub fn gaussian_cmi_from_rho(rho: &DMatrix<f64>, x: usize, y: usize, s: &[usize]) -> Cmi {
    match partial_correlation(rho, x, y, s) {
        Some(r) if r.abs() < 1.0 => Cmi {
            value: (-0.5 * (1.0 - r * r).ln()).max(0.0),
            degenerate: false,
        },
        Some(_) => Cmi {
            value: f64::INFINITY,
            degenerate: false,
        },
        None => Cmi {
            value: f64::INFINITY,
            degenerate: true,
        },
    }
}

pub fn gaussian_cmi(d: &DMatrix<f64>, x: usize, y: usize, s: &[usize]) -> Result<Cmi> {
    check_ci_args(d.ncols(), d.nrows(), x, y, s)?;
    let st = summary_stats(d)?;
    Ok(gaussian_cmi_from_rho(&st.rho, x, y, s))
}

/// Midranks (1-based, ties averaged) and the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = r;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Largest pooled sample size handled by exact enumeration.
pub const EXACT_RANK_SUM_LIMIT: usize = 25;

/// Two-sided Wilcoxon rank-sum test of `a` against `b`. Returns the rank sum
/// of `a` and the p-value.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return param("rank-sum test needs two nonempty samples");
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let (n1, n2) = (a.len(), b.len());
    let total = n1 + n2;
    let w: f64 = ranks[..n1].iter().sum();
    let p = if total <= EXACT_RANK_SUM_LIMIT {
        exact_rank_sum_p(&ranks, n1, w)
    } else {
        let nf = total as f64;
        let mu = n1 as f64 * (nf + 1.0) / 2.0;
        let tie: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
        let var = n1 as f64 * n2 as f64 / 12.0 * ((nf + 1.0) - tie / (nf * (nf - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let dev = ((w - mu).abs() - 0.5).max(0.0);
            normal_two_sided(dev / var.sqrt())
        }
    };
    Ok((w, p))
}

/// Permutation distribution of the rank sum given the observed ranks
/// (ties included), by dynamic programming over doubled midranks.
fn exact_rank_sum_p(ranks: &[f64], n1: usize, w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled-rank sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                let add = counts[k - 1][s - r];
                if add != 0.0 {
                    counts[k][s] += add;
                }
            }
        }
    }
    let dist = &counts[n1];
    let all: f64 = dist.iter().sum();
    let w2 = (2.0 * w).round() as usize;
    let lower: f64 = dist[..=w2.min(max_sum)].iter().sum();
    let upper: f64 = dist[w2.min(max_sum + 1)..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; n];
    let mut running = 1.0f64;
    for rank in (0..n).rev() {
        let k = order[rank];
        running = running.min(p[k] * n as f64 / (rank + 1) as f64);
        // n·p/rank ≥ p exactly; guard against rounding
        adjusted[k] = running.max(p[k]).clamp(0.0, 1.0);
    }
    adjusted
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankSumReport {
    pub raw: Vec<f64>,
    pub adjusted: Vec<f64>,
}

/// Per-column rank-sum tests of `int` against `obs`, BH-adjusted across
/// columns.
pub fn wilcoxon_bh(obs: &DMatrix<f64>, int: &DMatrix<f64>) -> Result<RankSumReport> {
    if obs.ncols() != int.ncols() {
        return Err(CoreError::Shape(format!("{} vs {} columns", obs.ncols(), int.ncols())));
    }
    if obs.nrows() == 0 || int.nrows() == 0 {
        return param("rank-sum tests need nonempty matrices");
    }
    let raw = (0..obs.ncols())
        .map(|j| {
            let a: Vec<f64> = int.column(j).iter().copied().collect();
            let b: Vec<f64> = obs.column(j).iter().copied().collect();
            rank_sum_test(&a, &b).map(|r| r.1)
        })
        .collect::<Result<Vec<_>>>()?;
    let adjusted = benjamini_hochberg(&raw);
    Ok(RankSumReport { raw, adjusted })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlassoConfig {
    pub lambda: f64,
    /// Stop when no covariance entry moves more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    pub inner_tol: f64,
    pub inner_max: usize,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            tol: 1e-7,
            max_sweeps: 500,
            inner_tol: 1e-10,
            inner_max: 2000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlassoFit {
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub sweeps: usize,
    /// `−log det W` after every sweep; the block updates maximize
    /// `log det W`, so this sequence does not increase.
    pub objective: Vec<f64>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn neg_log_det(w: &DMatrix<f64>) -> f64 {
    match w.clone().cholesky() {
        Some(c) => -2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => f64::INFINITY,
    }
}

/// Block coordinate descent graphical lasso with an off-diagonal L1 penalty.
///
/// The diagonal of the covariance estimate stays at the empirical diagonal.
/// Each column update solves its lasso subproblem by coordinate descent.
pub fn graphical_lasso(s: &DMatrix<f64>, config: &GlassoConfig) -> Result<GlassoFit> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(CoreError::Shape(format!("covariance is {}×{}", n, s.ncols())));
    }
    if !(config.lambda > 0.0) {
        return param(format!("lambda {} must be positive", config.lambda));
    }
    let mut w = s.clone();
    let mut beta = DMatrix::<f64>::zeros(n.saturating_sub(1), n);
    let mut objective = Vec::new();
    let mut sweeps = 0;
    if n > 1 {
        loop {
            sweeps += 1;
            let mut last_change = 0.0f64;
            for j in 0..n {
                let others: Vec<usize> = (0..n).filter(|&k| k != j).collect();
                let p = others.len();
                let w11 = DMatrix::from_fn(p, p, |a, b| w[(others[a], others[b])]);
                let s12: Vec<f64> = others.iter().map(|&k| s[(k, j)]).collect();
                let mut b: Vec<f64> = beta.column(j).iter().copied().collect();
                for _ in 0..config.inner_max {
                    let mut moved = 0.0f64;
                    for a in 0..p {
                        let resid: f64 = s12[a]
                            - (0..p).filter(|&c| c != a).map(|c| w11[(a, c)] * b[c]).sum::<f64>();
                        let new = soft_threshold(resid, config.lambda) / w11[(a, a)];
                        moved = moved.max((new - b[a]).abs());
                        b[a] = new;
                    }
                    if moved < config.inner_tol {
                        break;
                    }
                }
                for a in 0..p {
                    let w12: f64 = (0..p).map(|c| w11[(a, c)] * b[c]).sum();
                    last_change = last_change.max((w[(others[a], j)] - w12).abs());
                    w[(others[a], j)] = w12;
                    w[(j, others[a])] = w12;
                }
                beta.set_column(j, &DVector::from_vec(b));
            }
            objective.push(neg_log_det(&w));
            if last_change < config.tol {
                break;
            }
            if sweeps >= config.max_sweeps {
                return Err(CoreError::NoConvergence {
                    sweeps,
                    last_change,
                    objective: *objective.last().unwrap(),
                });
            }
        }
    }
    let mut precision = DMatrix::zeros(n, n);
    for j in 0..n {
        let others: Vec<usize> = (0..n).filter(|&k| k != j).collect();
        let b = beta.column(j);
        let w12b: f64 = others.iter().enumerate().map(|(a, &k)| w[(k, j)] * b[a]).sum();
        let theta_jj = 1.0 / (w[(j, j)] - w12b);
        precision[(j, j)] = theta_jj;
        for (a, &k) in others.iter().enumerate() {
            precision[(k, j)] = -b[a] * theta_jj;
        }
    }
    // symmetrize the column-wise estimates
    let precision = (&precision + precision.transpose()) * 0.5;
    Ok(GlassoFit {
        covariance: w,
        precision,
        sweeps,
        objective,
    })
}

/// Threshold on `|Θ_vd|` for boundary membership.
pub const BOUNDARY_EPS: f64 = 1e-8;

/// Markov boundary of the last column (a binary domain indicator) from the
/// graphical lasso on standardized data.
pub fn markov_boundary(joint: &DMatrix<f64>, config: &GlassoConfig) -> Result<Vec<usize>> {
    let n = joint.ncols();
    if n < 2 {
        return param("need at least one variable besides the domain column");
    }
    let st = summary_stats(joint)?;
    let fit = graphical_lasso(&st.rho, config)?;
    let d = n - 1;
    Ok((0..d)
        .filter(|&v| fit.precision[(v, d)].abs() > BOUNDARY_EPS)
        .collect())
}

/// Stacks `obs` over `int` and appends the domain column (0 for `obs`,
/// 1 for `int`).
pub fn stack_with_domain(obs: &DMatrix<f64>, int: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if obs.ncols() != int.ncols() {
        return Err(CoreError::Shape(format!("{} vs {} columns", obs.ncols(), int.ncols())));
    }
    let (m1, m2, n) = (obs.nrows(), int.nrows(), obs.ncols());
    Ok(DMatrix::from_fn(m1 + m2, n + 1, |r, c| match (r < m1, c == n) {
        (true, true) => 0.0,
        (false, true) => 1.0,
        (true, false) => obs[(r, c)],
        (false, false) => int[(r - m1, c)],
    }))
}

/// Per-column `mean(int) − mean(obs)`.
pub fn log_fold_change(obs: &DMatrix<f64>, int: &DMatrix<f64>) -> Result<DVector<f64>> {
    if obs.ncols() != int.ncols() {
        return Err(CoreError::Shape(format!("{} vs {} columns", obs.ncols(), int.ncols())));
    }
    if obs.nrows() == 0 || int.nrows() == 0 {
        return param("fold change needs nonempty matrices");
    }
    Ok(DVector::from_iterator(
        obs.ncols(),
        (0..obs.ncols()).map(|j| int.column(j).mean() - obs.column(j).mean()),
    ))
}
