//! Ranking metrics and the benchmark harness.
//!
//! Scores rank nodes, higher first. Ties are handled without breaking them
//! arbitrarily: average precision evaluates precision at the tie group's
//! threshold, AUC counts a tie as half a win, and positions are the mean
//! position of the tie group.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Cell, Corpus, DatasetMeta, RegimeData};
use crate::error::{io_err, param, Result};
use crate::scm::Dag;
use nalgebra::DMatrix;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return param(format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return param("scores contain NaN");
    }
    Ok(())
}

/// Average precision: the mean, over positives, of the precision among all
/// items scoring at least as high as that positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return param("average precision needs at least one positive");
    }
    let (mut seen, mut hits, mut total) = (0usize, 0usize, 0.0);
    let mut at = 0;
    while at < order.len() {
        let mut end = at;
        while end < order.len() && scores[order[end]] == scores[order[at]] {
            end += 1;
        }
        let group_hits = order[at..end].iter().filter(|&&i| labels[i]).count();
        seen += end - at;
        hits += group_hits;
        total += group_hits as f64 * hits as f64 / seen as f64;
        at = end;
    }
    Ok(total / positives as f64)
}

/// Mann–Whitney AUC: `P(pos > neg) + ½·P(pos = neg)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return param("AUC needs both classes");
    }
    let (ranks, _) = crate::stats::midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based position of `target` in descending order, averaged over its
/// tie group.
pub fn target_position(scores: &[f64], target: usize) -> Result<f64> {
    if target >= scores.len() {
        return param(format!("target {target} out of range for {} scores", scores.len()));
    }
    let s = scores[target];
    let above = scores.iter().filter(|&&v| v > s).count() as f64;
    let tied = scores.iter().filter(|&&v| v == s).count() as f64;
    Ok(above + (tied + 1.0) / 2.0)
}

/// `(C − pos)/(C − 1)`: 1 for the top of the list, 0 for the bottom.
pub fn normalized_rank(scores: &[f64], target: usize) -> Result<f64> {
    let c = scores.len();
    if c < 2 {
        return param("normalized rank needs at least two candidates");
    }
    let pos = target_position(scores, target)?;
    Ok((c as f64 - pos) / (c as f64 - 1.0))
}

/// One target's place in one ranking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetHit {
    pub position: f64,
    pub candidates: usize,
}

/// Fraction of hits with `position ≤ ⌈p·C⌉`, per grid point.
pub fn recall_curve(hits: &[TargetHit], grid: &[f64]) -> Vec<(f64, f64)> {
    grid.iter()
        .map(|&p| {
            let found = hits
                .iter()
                .filter(|h| h.position <= (p * h.candidates as f64).ceil())
                .count();
            (p, if hits.is_empty() { 0.0 } else { found as f64 / hits.len() as f64 })
        })
        .collect()
}

/// Exact `∫₀¹ recall(p) dp` of the step curve.
pub fn recall_integral(hits: &[TargetHit]) -> f64 {
    // recall steps up for a hit once p·C exceeds ⌈position⌉ − 1
    let area: f64 = hits
        .iter()
        .map(|h| 1.0 - ((h.position.ceil() - 1.0) / h.candidates as f64).clamp(0.0, 1.0))
        .sum();
    area / hits.len().max(1) as f64
}

/// Trapezoidal integral of sampled `(p, recall)` points.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Evenly spaced grid `0, 1/steps, …, 1`.
pub fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| (cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman and Pearson correlations. `None` marks an undefined value
/// (a constant input).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectCorrelation {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

pub fn effect_correlation(pred: &[f64], truth: &[f64]) -> Result<EffectCorrelation> {
    if pred.len() != truth.len() || pred.len() < 3 {
        return param(format!("need equal lengths of at least 3, got {} and {}", pred.len(), truth.len()));
    }
    let (rp, _) = crate::stats::midranks(pred);
    let (rt, _) = crate::stats::midranks(truth);
    Ok(EffectCorrelation {
        spearman: pearson(&rp, &rt),
        pearson: pearson(pred, truth),
    })
}

// ----- harness -----

/// Everything a scorer may read about one regime.
pub struct RegimeCase<'a> {
    pub corpus: &'a Corpus,
    pub meta: &'a DatasetMeta,
    pub regime: usize,
    pub obs: &'a DMatrix<f64>,
    pub g_obs: &'a Dag,
    pub data: &'a RegimeData,
}

/// A target-scoring method.
pub trait Scorer: Sync {
    fn method(&self) -> String;
    fn score(&self, case: &RegimeCase) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Metrics per regime, then the mean over the group.
    #[default]
    PerRegime,
    /// One ranking problem over all (regime, node) items of the group.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub grid_steps: usize,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_steps: 100,
            aggregation: Aggregation::PerRegime,
        }
    }
}

/// Scores and timing for one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub dataset: usize,
    pub regime: usize,
    pub cell: Cell,
    pub targets: Vec<usize>,
    pub method: String,
    pub scores: Vec<f64>,
    pub seconds: f64,
}

impl RegimeResult {
    pub fn labels(&self) -> Vec<bool> {
        let mut l = vec![false; self.scores.len()];
        for &t in &self.targets {
            l[t] = true;
        }
        l
    }

    pub fn hits(&self) -> Result<Vec<TargetHit>> {
        self.targets
            .iter()
            .map(|&t| {
                Ok(TargetHit {
                    position: target_position(&self.scores, t)?,
                    candidates: self.scores.len(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub family: String,
    pub intervention: String,
    pub targets: usize,
    pub regimes: usize,
    pub map: f64,
    pub auc: f64,
    pub mean_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl RuntimeStats {
    pub fn of(seconds: &[f64]) -> Self {
        if seconds.is_empty() {
            return Self {
                min: 0.0,
                max: 0.0,
                mean: 0.0,
                std: 0.0,
            };
        }
        let n = seconds.len() as f64;
        let mean = seconds.iter().sum::<f64>() / n;
        let var = if seconds.len() > 1 {
            seconds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            min: seconds.iter().copied().fold(f64::INFINITY, f64::min),
            max: seconds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub aggregation: Aggregation,
    pub groups: Vec<GroupReport>,
    pub mean_rank: f64,
    pub recall: Vec<(f64, f64)>,
    pub runtime: RuntimeStats,
    pub evaluated: usize,
    /// Regimes whose scorer failed; they are excluded from every metric.
    pub failed: usize,
}

impl Report {
    /// The group for `(family, intervention, targets)`, if present.
    pub fn group(&self, family: &str, intervention: &str, targets: usize) -> Option<&GroupReport> {
        self.groups
            .iter()
            .find(|g| g.family == family && g.intervention == intervention && g.targets == targets)
    }

    /// Regime-weighted mean of a metric over the groups matching a family
    /// and intervention.
    pub fn pooled_groups(&self, family: &str, intervention: &str, metric: impl Fn(&GroupReport) -> f64) -> Option<f64> {
        let gs: Vec<_> = self
            .groups
            .iter()
            .filter(|g| g.family == family && g.intervention == intervention)
            .collect();
        let n: usize = gs.iter().map(|g| g.regimes).sum();
        (n > 0).then(|| gs.iter().map(|g| metric(g) * g.regimes as f64).sum::<f64>() / n as f64)
    }
}

/// Groups results by (family, intervention, target count) and aggregates.
pub fn aggregate(method: &str, results: &[RegimeResult], failed: usize, config: &EvalConfig) -> Result<Report> {
    let mut keys: Vec<(String, String, usize)> = results
        .iter()
        .map(|r| (r.cell.family.name().to_string(), r.cell.intervention.name().to_string(), r.targets.len()))
        .collect();
    keys.sort();
    keys.dedup();
    let mut groups = Vec::with_capacity(keys.len());
    for (family, intervention, size) in keys {
        let members: Vec<&RegimeResult> = results
            .iter()
            .filter(|r| r.cell.family.name() == family && r.cell.intervention.name() == intervention && r.targets.len() == size)
            .collect();
        let (map, auc) = match config.aggregation {
            Aggregation::PerRegime => {
                let mut ap = 0.0;
                let mut au = 0.0;
                for r in &members {
                    let labels = r.labels();
                    ap += average_precision(&r.scores, &labels)?;
                    au += auroc(&r.scores, &labels)?;
                }
                (ap / members.len() as f64, au / members.len() as f64)
            }
            Aggregation::Pooled => {
                let scores: Vec<f64> = members.iter().flat_map(|r| r.scores.iter().copied()).collect();
                let labels: Vec<bool> = members.iter().flat_map(|r| r.labels()).collect();
                (average_precision(&scores, &labels)?, auroc(&scores, &labels)?)
            }
        };
        let mut ranks = Vec::new();
        for r in &members {
            for &t in &r.targets {
                ranks.push(normalized_rank(&r.scores, t)?);
            }
        }
        groups.push(GroupReport {
            family,
            intervention,
            targets: size,
            regimes: members.len(),
            map,
            auc,
            mean_rank: ranks.iter().sum::<f64>() / ranks.len() as f64,
        });
    }
    let mut hits = Vec::new();
    let mut ranks = Vec::new();
    for r in results {
        for (&t, h) in r.targets.iter().zip(r.hits()?) {
            ranks.push(normalized_rank(&r.scores, t)?);
            hits.push(h);
        }
    }
    let seconds: Vec<f64> = results.iter().map(|r| r.seconds).collect();
    Ok(Report {
        method: method.to_string(),
        aggregation: config.aggregation,
        groups,
        mean_rank: ranks.iter().sum::<f64>() / ranks.len().max(1) as f64,
        recall: recall_curve(&hits, &uniform_grid(config.grid_steps.max(1))),
        runtime: RuntimeStats::of(&seconds),
        evaluated: results.len(),
        failed,
    })
}

/// Runs `scorer` on every regime of `datasets` (parallel across datasets,
/// collected in dataset then regime order). Failing regimes are logged,
/// counted and left out.
pub fn run_suite(scorer: &dyn Scorer, corpus: &Corpus, datasets: &[usize]) -> Result<(Vec<RegimeResult>, usize)> {
    let method = scorer.method();
    let per_dataset: Vec<(Vec<RegimeResult>, usize)> = datasets
        .par_iter()
        .map(|&id| -> Result<(Vec<RegimeResult>, usize)> {
            let meta = corpus.meta(id)?;
            let obs = corpus.obs(&meta)?;
            let g_obs = corpus.graph_obs(&meta)?;
            let mut out = Vec::with_capacity(meta.regimes.len());
            let mut failed = 0;
            for r in 0..meta.regimes.len() {
                let data = corpus.regime(&meta, r)?;
                let case = RegimeCase {
                    corpus,
                    meta: &meta,
                    regime: r,
                    obs: &obs,
                    g_obs: &g_obs,
                    data: &data,
                };
                let start = Instant::now();
                match scorer.score(&case) {
                    Ok(scores) if scores.len() == meta.cell.n && scores.iter().all(|s| s.is_finite()) => {
                        out.push(RegimeResult {
                            dataset: id,
                            regime: r,
                            cell: meta.cell.clone(),
                            targets: data.regime.targets.clone(),
                            method: method.clone(),
                            scores,
                            seconds: start.elapsed().as_secs_f64(),
                        })
                    }
                    Ok(scores) => {
                        log::warn!("{method}: dataset {id} regime {r}: {} scores, not all finite", scores.len());
                        failed += 1;
                    }
                    Err(e) => {
                        log::warn!("{method}: dataset {id} regime {r}: {e}");
                        failed += 1;
                    }
                }
            }
            Ok((out, failed))
        })
        .collect::<Result<_>>()?;
    let failed = per_dataset.iter().map(|p| p.1).sum();
    Ok((per_dataset.into_iter().flat_map(|p| p.0).collect(), failed))
}

pub fn evaluate_suite(scorer: &dyn Scorer, corpus: &Corpus, datasets: &[usize], config: &EvalConfig) -> Result<(Report, Vec<RegimeResult>)> {
    let (results, failed) = run_suite(scorer, corpus, datasets)?;
    let report = aggregate(&scorer.method(), &results, failed, config)?;
    Ok((report, results))
}

/// Writes `report.json` (or `report_path`), `per_regime.csv` and
/// `recall_curve.csv` next to it.
pub fn write_report(report_path: &Path, report: &Report, results: &[RegimeResult]) -> Result<()> {
    let dir = report_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    crate::corpus::write_json(report_path, report)?;
    let mut rows = String::from("dataset,regime,method,mAP,AUC,rank,seconds\n");
    for r in results {
        let labels = r.labels();
        let ranks: Vec<f64> = r.targets.iter().map(|&t| normalized_rank(&r.scores, t)).collect::<Result<_>>()?;
        rows.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.dataset,
            r.regime,
            r.method,
            average_precision(&r.scores, &labels)?,
            auroc(&r.scores, &labels)?,
            ranks.iter().sum::<f64>() / ranks.len() as f64,
            r.seconds
        ));
    }
    let csv = dir.join("per_regime.csv");
    fs::write(&csv, rows).map_err(io_err(&csv))?;
    let mut curve = String::from("p,recall\n");
    for (p, r) in &report.recall {
        curve.push_str(&format!("{p},{r}\n"));
    }
    let path = dir.join("recall_curve.csv");
    fs::write(&path, curve).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.8], &[true, false, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.1], &[false, true, true]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap(), 0.5);
        assert_eq!(normalized_rank(&[3.0, 2.0, 1.0], 1).unwrap(), 0.5);
        assert!(average_precision(&[1.0], &[false]).is_err());
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
    }
}
