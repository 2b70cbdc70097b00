//! The target prediction network and its training loop.
//!
//! A structure learner turns each side's features into pair
//! representations `h: N×N×d` and edge-type logits. A second network
//! compares the two sides and emits one target logit per node.
//!
//! Token lattice: every ordered pair `(i, j)` carries a correlation token
//! and `T` local-estimate tokens (a mark-pair code, or "not covered"). Many
//! of the `T` tokens coincide, so each pair stores its distinct tokens with
//! multiplicities. Attention over the pair's tokens adds `ln(count)` to the
//! key scores, and pooling weights each distinct token by its count. This
//! reproduces attention and mean-pooling over the expanded `T + 1` tokens
//! exactly, at a fraction of the cost.

mod net;
mod train;

use serde::{Deserialize, Serialize};

use crate::discovery::PAIR_CODES;
use crate::error::{param, Result};
use crate::features::{FeatureSide, FeaturizeConfig};
use crate::scm::Dag;

pub use net::{edge_probabilities, sigmoid, Cdn, Output};
pub use train::{
    load_checkpoint, load_examples, predict_from_tokens, predict_graphs, predict_targets, sample_perm, save_checkpoint, split_validation, train, CdnScorer, Example,
    LogRow, Trained, TrainConfig, CHECKPOINT_FILE, LOG_FILE,
};

/// Code-table row of the "not covered" token.
pub const NOT_COVERED: usize = PAIR_CODES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Subtract the observational side from the interventional side.
    #[default]
    Diff,
    /// Concatenate both sides to width `2d`.
    Cat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub structure_layers: usize,
    /// Defaults to 2 for `diff` and 3 for `cat`.
    pub diff_layers: Option<usize>,
    pub variant: Variant,
    /// Rows of the node embedding table; bounds N.
    pub n_max: usize,
    pub dropout: f64,
    pub features: FeaturizeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 1,
            ffn_mult: 4,
            structure_layers: 4,
            diff_layers: None,
            variant: Variant::Diff,
            n_max: 128,
            dropout: 0.1,
            features: FeaturizeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn diff_layers(&self) -> usize {
        self.diff_layers.unwrap_or(match self.variant {
            Variant::Diff => 2,
            Variant::Cat => 3,
        })
    }

    /// Width of the comparison network.
    pub fn diff_width(&self) -> usize {
        match self.variant {
            Variant::Diff => self.dim,
            Variant::Cat => 2 * self.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return param(format!("width {} must be a positive multiple of {} heads", self.dim, self.heads));
        }
        if self.ffn_mult == 0 || self.n_max < 2 || self.diff_layers() == 0 {
            return param("ffn_mult, n_max and diff layers must be positive (n_max ≥ 2)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return param(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.features.k < 2 || self.features.t == 0 || !(self.features.alpha > 0.0 && self.features.alpha < 1.0) {
            return param(format!("featurization {:?} invalid", self.features));
        }
        Ok(())
    }
}

/// `sign(x)·ln(1 + |x|)`, applied to node moments before the network so
/// scale differences between datasets stay bounded.
pub fn squash(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Network input for one side, independent of the node permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct SideTokens {
    pub n: usize,
    /// Token slots per pair: the correlation token, then local-estimate
    /// tokens (padded).
    pub len: usize,
    /// Code-table row of each local-estimate slot, `N·N × (len − 1)`.
    pub codes: Vec<usize>,
    /// Multiplicity of each slot, `N·N × len`; 0 marks padding.
    pub counts: Vec<f64>,
    pub rho: Vec<f64>,
    /// Squashed `(mean, variance)` per node.
    pub moments: Vec<f64>,
    /// Number of local estimates the side was built from.
    pub t: usize,
}

impl SideTokens {
    /// Builds the lattice input. `compress` stores distinct tokens with
    /// counts; otherwise every estimate is its own slot.
    pub fn new(side: &FeatureSide, compress: bool) -> Self {
        let n = side.n();
        let t = side.local.t();
        let mut per_pair: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut tokens = vec![NOT_COVERED; t];
                if i != j {
                    for (slot, (s, p)) in side.local.subsets.iter().zip(&side.local.pags).enumerate() {
                        if let (Some(a), Some(b)) = (s.iter().position(|&v| v == i), s.iter().position(|&v| v == j)) {
                            tokens[slot] = p.pair_code(a, b) as usize;
                        }
                    }
                }
                let slots = if compress {
                    let mut counts = [0usize; PAIR_CODES + 1];
                    for &c in &tokens {
                        counts[c] += 1;
                    }
                    counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(code, &c)| (code, c as f64))
                        .collect()
                } else {
                    tokens.into_iter().map(|c| (c, 1.0)).collect()
                };
                per_pair.push(slots);
            }
        }
        let len = 1 + per_pair.iter().map(Vec::len).max().unwrap_or(0);
        let mut codes = Vec::with_capacity(n * n * (len - 1));
        let mut counts = Vec::with_capacity(n * n * len);
        for slots in &per_pair {
            counts.push(1.0);
            for s in 0..len - 1 {
                let (code, c) = slots.get(s).copied().unwrap_or((NOT_COVERED, 0.0));
                codes.push(code);
                counts.push(c);
            }
        }
        let moments = (0..n).flat_map(|i| [squash(side.mean[i]), squash(side.var[i])]).collect();
        Self {
            n,
            len,
            codes,
            counts,
            rho: (0..n * n).map(|k| side.rho[(k / n, k % n)]).collect(),
            moments,
            t,
        }
    }
}

/// Both sides of one (observational, interventional) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTokens {
    pub obs: std::sync::Arc<SideTokens>,
    pub int: SideTokens,
}

/// Edge class of `(i, j)`, `i < j`: 0 for `i → j`, 1 for `j → i`, 2 for none.
pub fn edge_labels(dag: &Dag) -> Vec<usize> {
    let n = dag.n();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(if dag.has_edge(i, j) {
                0
            } else if dag.has_edge(j, i) {
                1
            } else {
                2
            });
        }
    }
    out
}

/// Per-node 0/1 target indicator.
pub fn target_indicator(n: usize, targets: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &t in targets {
        v[t] = 1.0;
    }
    v
}
