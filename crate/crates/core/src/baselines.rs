//! Comparison methods that score nodes as likely intervention targets.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cdn_nn::ParamStore;

use crate::error::{io_err, param, CoreError, Result};
use crate::eval::{RegimeCase, Scorer};
use crate::features::{obs_features, regime_features, Cache};
use crate::model::{predict_graphs, Cdn, SideTokens};
use crate::scm::derive_seed;
use crate::stats::{
    gaussian_cmi_from_rho, log_fold_change, markov_boundary, stack_with_domain, summary_stats, wilcoxon_bh,
    GlassoConfig, SummaryStats,
};

/// Per-node scores; higher means more likely a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScores {
    pub method: String,
    pub scores: Vec<f64>,
}

impl NodeScores {
    fn new(method: &str, scores: Vec<f64>) -> Self {
        Self {
            method: method.to_string(),
            scores,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node_index,score\n");
        for (i, v) in self.scores.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Counts, per column `i`, the edges `j → i` present in `adj_obs` but
/// missing from `adj_int` (row-major `N×N` 0/1 matrices).
pub fn analytic_hard_detector(adj_obs: &[u8], adj_int: &[u8], n: usize) -> Result<NodeScores> {
    if adj_obs.len() != n * n || adj_int.len() != n * n {
        return Err(CoreError::Shape(format!(
            "adjacency lengths {} and {} for N={n}",
            adj_obs.len(),
            adj_int.len()
        )));
    }
    let scores = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| adj_obs[j * n + i] as i32 - adj_int[j * n + i] as i32 > 0)
                .count() as f64
        })
        .collect();
    Ok(NodeScores::new("analytic-hard", scores))
}

/// Thresholds of the soft detector: `eps_r` on correlation changes and a
/// per-entry `eps_s` on covariance changes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftThresholds {
    pub eps_r: f64,
    pub eps_s: DMatrix<f64>,
}

/// Bootstrap resamples behind the default covariance thresholds.
pub const SOFT_BOOTSTRAP: usize = 50;

fn bootstrap_cov_se(d: &DMatrix<f64>, b: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let (m, n) = d.shape();
    let mut sum = DMatrix::zeros(n, n);
    let mut sq = DMatrix::zeros(n, n);
    for _ in 0..b {
        let rows: Vec<usize> = (0..m).map(|_| rng.gen_range(0..m)).collect();
        let resampled = DMatrix::from_fn(m, n, |r, c| d[(rows[r], c)]);
        let cov = summary_stats(&resampled)?.cov;
        sum += &cov;
        sq += cov.component_mul(&cov);
    }
    let bf = b as f64;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let mean = sum[(i, j)] / bf;
        ((sq[(i, j)] / bf - mean * mean).max(0.0) * bf / (bf - 1.0)).sqrt()
    }))
}

/// Sample-size-aware defaults: `eps_r = 3/√min(M_obs, M_int)` and
/// `eps_s = 3·SE(ΔΣ_ij)` with each side's standard error bootstrapped.
pub fn default_soft_thresholds(obs: &DMatrix<f64>, int: &DMatrix<f64>, seed: u64) -> Result<SoftThresholds> {
    if obs.ncols() != int.ncols() {
        return Err(CoreError::Shape(format!("{} vs {} columns", obs.ncols(), int.ncols())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let se_obs = bootstrap_cov_se(obs, SOFT_BOOTSTRAP, &mut rng)?;
    let se_int = bootstrap_cov_se(int, SOFT_BOOTSTRAP, &mut rng)?;
    let m = obs.nrows().min(int.nrows()) as f64;
    Ok(SoftThresholds {
        eps_r: 3.0 / m.sqrt(),
        eps_s: se_obs.zip_map(&se_int, |a, b| 3.0 * (a * a + b * b).sqrt()),
    })
}

/// Counts, per node `i`, the `j` (including `i`) where the covariance moved
/// beyond `eps_s` but the correlation stayed within `eps_r`.
pub fn analytic_soft_detector(obs: &SummaryStats, int: &SummaryStats, th: &SoftThresholds) -> Result<NodeScores> {
    let n = obs.cov.nrows();
    if int.cov.nrows() != n || th.eps_s.shape() != (n, n) {
        return Err(CoreError::Shape(format!(
            "N={n} vs {} and thresholds {:?}",
            int.cov.nrows(),
            th.eps_s.shape()
        )));
    }
    if !(th.eps_r > 0.0) || th.eps_s.iter().any(|e| !(*e > 0.0)) {
        return param("soft detector thresholds must be positive");
    }
    let scores = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    let ds = (int.cov[(i, j)] - obs.cov[(i, j)]).abs();
                    let dr = (int.rho[(i, j)] - obs.rho[(i, j)]).abs();
                    ds > th.eps_s[(i, j)] && dr < th.eps_r
                })
                .count() as f64
        })
        .collect();
    Ok(NodeScores::new("analytic-soft", scores))
}

/// Cap on a boundary member's score when the conditional mutual information
/// is infinite (perfect dependence or a singular conditioning set).
pub const CMI_CAP: f64 = 1e3;

/// Markov boundary of the domain indicator via graphical lasso; boundary
/// members score their conditional mutual information with the domain
/// given the rest of the boundary, others score 0.
pub fn mb_ci_scores(obs: &DMatrix<f64>, int: &DMatrix<f64>, config: &GlassoConfig) -> Result<NodeScores> {
    let joint = stack_with_domain(obs, int)?;
    let n = obs.ncols();
    let boundary = markov_boundary(&joint, config)?;
    let rho = summary_stats(&joint)?.rho;
    let mut scores = vec![0.0; n];
    for &v in &boundary {
        let rest: Vec<usize> = boundary.iter().copied().filter(|&u| u != v).collect();
        scores[v] = gaussian_cmi_from_rho(&rho, n, v, &rest).value.min(CMI_CAP);
    }
    Ok(NodeScores::new("mbci", scores))
}

/// `−log₁₀` of the Benjamini–Hochberg adjusted rank-sum p-value. Exactly
/// tied p-values are ordered by absolute fold change through an offset
/// smaller than half the gap to the next distinct value.
pub fn dge_scores(obs: &DMatrix<f64>, int: &DMatrix<f64>) -> Result<NodeScores> {
    let report = wilcoxon_bh(obs, int)?;
    let lfc = log_fold_change(obs, int)?;
    let base: Vec<f64> = report
        .adjusted
        .iter()
        .map(|&p| -p.max(f64::MIN_POSITIVE).log10())
        .collect();
    let mut distinct = base.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let gap = distinct
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(1.0f64, f64::min);
    let scores = base
        .iter()
        .zip(lfc.iter())
        .map(|(&b, l)| b + 0.5 * gap * l.abs() / (1.0 + l.abs()))
        .collect();
    Ok(NodeScores::new("dge", scores))
}

/// Baseline methods runnable by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Mbci,
    Dge,
    AnalyticHard,
    AnalyticSoft,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [Self::Mbci, Self::Dge, Self::AnalyticHard, Self::AnalyticSoft];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mbci => "mbci",
            Self::Dge => "dge",
            Self::AnalyticHard => "analytic-hard",
            Self::AnalyticSoft => "analytic-soft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Where the hard detector gets its graphs.
pub enum GraphSource {
    /// The true graphs stored with the corpus.
    Oracle,
    /// Graphs estimated by a trained structure learner.
    Learned { model: Box<Cdn>, store: ParamStore<f32>, permutations: usize },
    None,
}

/// Scores a raw (observational, interventional) pair with a baseline.
/// `graphs` is only read by the hard detector.
pub fn baseline_scores(
    method: BaselineMethod,
    obs: &DMatrix<f64>,
    int: &DMatrix<f64>,
    graphs: Option<(&[u8], &[u8])>,
    glasso: &GlassoConfig,
    seed: u64,
) -> Result<NodeScores> {
    match method {
        BaselineMethod::Mbci => mb_ci_scores(obs, int, glasso),
        BaselineMethod::Dge => dge_scores(obs, int),
        BaselineMethod::AnalyticSoft => {
            let th = default_soft_thresholds(obs, int, seed)?;
            analytic_soft_detector(&summary_stats(obs)?, &summary_stats(int)?, &th)
        }
        BaselineMethod::AnalyticHard => match graphs {
            Some((a, b)) => analytic_hard_detector(a, b, obs.ncols()),
            None => param("the hard detector needs oracle or learned graphs"),
        },
    }
}

/// Harness adapter for the baselines.
pub struct BaselineScorer {
    pub method: BaselineMethod,
    pub glasso: GlassoConfig,
    pub graphs: GraphSource,
    pub seed: u64,
}

impl Scorer for BaselineScorer {
    fn method(&self) -> String {
        self.method.name().to_string()
    }

    fn score(&self, case: &RegimeCase) -> Result<Vec<f64>> {
        let seed = derive_seed(derive_seed(self.seed, case.meta.id as u64), case.regime as u64);
        let graphs = match (&self.graphs, self.method) {
            (_, m) if m != BaselineMethod::AnalyticHard => None,
            (GraphSource::Oracle, _) => Some((case.g_obs.adjacency(), case.data.graph.adjacency())),
            (GraphSource::Learned { model, store, permutations }, _) => {
                let f = &model.config.features;
                let obs = SideTokens::new(&obs_features(case.corpus, case.meta, f, Cache::Compute)?, true);
                let int = SideTokens::new(&regime_features(case.corpus, case.meta, case.regime, f, Cache::Compute)?, true);
                Some(predict_graphs(model, store, &obs, &int, seed, *permutations)?)
            }
            (GraphSource::None, _) => None,
        };
        let graphs = graphs.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
        Ok(baseline_scores(self.method, case.obs, &case.data.int, graphs, &self.glasso, seed)?.scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_detector_counts_removed_in_edges() {
        let n = 5;
        let mut obs = vec![0u8; n * n];
        obs[n + 3] = 1;
        obs[2 * n + 3] = 1;
        obs[2] = 1;
        let mut int = obs.clone();
        int[n + 3] = 0;
        int[2 * n + 3] = 0;
        let s = analytic_hard_detector(&obs, &int, n).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.0, 0.0, 2.0, 0.0]);
        assert_eq!(analytic_hard_detector(&obs, &obs, n).unwrap().scores, vec![0.0; n]);
        assert!(analytic_hard_detector(&obs, &int[1..], n).is_err());
    }
}
