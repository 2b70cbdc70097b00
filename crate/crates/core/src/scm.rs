//! Structural causal models: random DAGs, mechanisms, interventions and
//! ancestral sampling.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Mixes `tag` into `base` (splitmix64 finalizer), for deriving independent
/// child seeds from one master seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Directed graph on `0..n` without self-loops or cycles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dag {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Dag {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: BTreeSet::new(),
        }
    }

    /// Validates indices, self-loops and acyclicity.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut dag = Self::empty(n);
        for (a, b) in edges {
            if a >= n || b >= n {
                return param(format!("edge {a}->{b} out of range for {n} nodes"));
            }
            if a == b {
                return param(format!("self-loop at {a}"));
            }
            dag.edges.insert((a, b));
        }
        if dag.topological_order().is_none() {
            return param("edge set contains a cycle");
        }
        Ok(dag)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a, b))
    }

    pub fn parents(&self, j: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == j).map(|e| e.0).collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        self.edges.range((i, 0)..(i + 1, 0)).map(|e| e.1).collect()
    }

    /// Kahn's algorithm, smallest ready index first; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg = vec![0usize; self.n];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..self.n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.n);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for c in self.children(v) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == self.n).then_some(order)
    }

    /// Row-major `n×n` 0/1 matrix with `adj[i*n + j] = 1` for `i→j`.
    pub fn adjacency(&self) -> Vec<u8> {
        let mut adj = vec![0u8; self.n * self.n];
        for &(a, b) in &self.edges {
            adj[a * self.n + b] = 1;
        }
        adj
    }

    /// The graph with every edge into `targets` removed.
    pub fn without_incoming(&self, targets: &[usize]) -> Self {
        Self {
            n: self.n,
            edges: self
                .edges
                .iter()
                .copied()
                .filter(|e| !targets.contains(&e.1))
                .collect(),
        }
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        Self {
            n: self.n,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
        }
    }

    /// Ancestors of the nodes in `set`, the set itself included.
    pub fn ancestors_of(&self, set: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut queue: VecDeque<usize> = set.iter().copied().collect();
        for &v in set {
            seen[v] = true;
        }
        while let Some(v) = queue.pop_front() {
            for p in self.parents(v) {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// d-separation of `x` and `y` given `z` (Bayes-ball reachability).
    pub fn d_separated(&self, x: usize, y: usize, z: &[usize]) -> bool {
        let anc = self.ancestors_of(z);
        let in_z = |v: usize| z.contains(&v);
        // state: (node, arrived from child = moving up)
        let mut seen = BTreeSet::new();
        let mut stack = vec![(x, true)];
        while let Some((v, up)) = stack.pop() {
            if !seen.insert((v, up)) {
                continue;
            }
            if v == y && !in_z(v) {
                return false;
            }
            if up {
                if !in_z(v) {
                    for p in self.parents(v) {
                        stack.push((p, true));
                    }
                    for c in self.children(v) {
                        stack.push((c, false));
                    }
                }
            } else {
                if !in_z(v) {
                    for c in self.children(v) {
                        stack.push((c, false));
                    }
                }
                if anc[v] {
                    for p in self.parents(v) {
                        stack.push((p, true));
                    }
                }
            }
        }
        true
    }
}

/// Samples an Erdős–Rényi DAG with `expected_edges` edges on average.
///
/// A uniformly random node order fixes the orientation; each of the
/// `n(n−1)/2` ordered pairs is kept independently.
pub fn sample_er_dag(n: usize, expected_edges: usize, seed: u64) -> Result<Dag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_er_dag_with(n, expected_edges, &mut rng)
}

pub fn sample_er_dag_with(n: usize, expected_edges: usize, rng: &mut impl Rng) -> Result<Dag> {
    if n == 0 {
        return param("a graph needs at least one node");
    }
    let pairs = n * (n - 1) / 2;
    if expected_edges > pairs {
        return param(format!("{expected_edges} expected edges exceed the {pairs} available pairs"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let p = if pairs == 0 { 0.0 } else { expected_edges as f64 / pairs as f64 };
    let mut dag = Dag::empty(n);
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen::<f64>() < p {
                dag.edges.insert((order[a], order[b]));
            }
        }
    }
    Ok(dag)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Linear,
    NnAdditive,
    NnNonAdditive,
    Polynomial,
    Sigmoid,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::NnAdditive => "nn-additive",
            Family::NnNonAdditive => "nn-non-additive",
            Family::Polynomial => "polynomial",
            Family::Sigmoid => "sigmoid",
        }
    }
}

/// Sampling laws for mechanism parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MechanismConfig {
    /// Weights are drawn from `±[weight_low, weight_high]` with a fair sign.
    pub weight_low: f64,
    pub weight_high: f64,
    pub noise_std_low: f64,
    pub noise_std_high: f64,
    pub root_low: f64,
    pub root_high: f64,
    pub hidden: usize,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            weight_low: 0.25,
            weight_high: 1.0,
            noise_std_low: 0.2,
            noise_std_high: 0.8,
            root_low: -1.0,
            root_high: 1.0,
            hidden: 10,
        }
    }
}

impl MechanismConfig {
    fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.weight_low
            && self.weight_low <= self.weight_high
            && 0.0 < self.noise_std_low
            && self.noise_std_low <= self.noise_std_high
            && self.root_low < self.root_high
            && self.hidden > 0;
        if !ok {
            return param(format!("inconsistent mechanism config {self:?}"));
        }
        Ok(())
    }

    fn weight(&self, rng: &mut impl Rng) -> f64 {
        let m = rng.gen_range(self.weight_low..=self.weight_high);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    }

    fn weights(&self, len: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..len).map(|_| self.weight(rng)).collect()
    }
}

/// Conditional of one node given its parents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mechanism {
    /// `x ~ U(low, high)`.
    Root { low: f64, high: f64 },
    /// `Σ wₚ·xₚ + e`.
    Linear {
        parents: Vec<usize>,
        weights: Vec<f64>,
        noise_std: f64,
    },
    /// `tanh(x·W_in)·W_out + e`; `w_in` is `parents × hidden`, row-major.
    NnAdditive {
        parents: Vec<usize>,
        w_in: Vec<f64>,
        w_out: Vec<f64>,
        noise_std: f64,
    },
    /// `tanh([x, e]·W_in)·W_out`; the noise is the last input row.
    NnNonAdditive {
        parents: Vec<usize>,
        w_in: Vec<f64>,
        w_out: Vec<f64>,
        noise_std: f64,
    },
    /// `(w0 + Σ w1ₚ·xₚ + Σ w2ₚ·xₚ² + e − offset) / scale`. The affine
    /// part is fitted once on observational draws so squares do not
    /// compound with depth.
    Polynomial {
        parents: Vec<usize>,
        w0: f64,
        w1: Vec<f64>,
        w2: Vec<f64>,
        noise_std: f64,
        offset: f64,
        scale: f64,
    },
    /// `Σ wₚ·sigmoid(xₚ) + e`.
    Sigmoid {
        parents: Vec<usize>,
        weights: Vec<f64>,
        noise_std: f64,
    },
    /// Hard intervention `x ~ U(low, high)`, parents ignored.
    Hard { low: f64, high: f64 },
    /// `f(x) + delta`.
    Shift { base: Box<Mechanism>, delta: f64 },
    /// `factor · f(x)`.
    Scale { base: Box<Mechanism>, factor: f64 },
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gauss(std: f64, rng: &mut impl Rng) -> f64 {
    Normal::new(0.0, std).expect("noise std validated").sample(rng)
}

fn tanh_layer(inputs: &[f64], w_in: &[f64], w_out: &[f64]) -> f64 {
    let h = w_out.len();
    (0..h)
        .map(|u| {
            let pre: f64 = inputs.iter().enumerate().map(|(p, &x)| x * w_in[p * h + u]).sum();
            pre.tanh() * w_out[u]
        })
        .sum()
}

impl Mechanism {
    /// Evaluates the mechanism on the current sample row, drawing noise
    /// from `rng`.
    pub fn eval(&self, row: &[f64], rng: &mut impl Rng) -> f64 {
        match self {
            Mechanism::Root { low, high } | Mechanism::Hard { low, high } => rng.gen_range(*low..*high),
            Mechanism::Linear {
                parents,
                weights,
                noise_std,
            } => parents.iter().zip(weights).map(|(&p, w)| w * row[p]).sum::<f64>() + gauss(*noise_std, rng),
            Mechanism::NnAdditive {
                parents,
                w_in,
                w_out,
                noise_std,
            } => {
                let x: Vec<f64> = parents.iter().map(|&p| row[p]).collect();
                tanh_layer(&x, w_in, w_out) + gauss(*noise_std, rng)
            }
            Mechanism::NnNonAdditive {
                parents,
                w_in,
                w_out,
                noise_std,
            } => {
                let mut x: Vec<f64> = parents.iter().map(|&p| row[p]).collect();
                x.push(gauss(*noise_std, rng));
                tanh_layer(&x, w_in, w_out)
            }
            Mechanism::Polynomial {
                parents,
                w0,
                w1,
                w2,
                noise_std,
                offset,
                scale,
            } => {
                let mut f = *w0;
                for (k, &p) in parents.iter().enumerate() {
                    f += w1[k] * row[p] + w2[k] * row[p] * row[p];
                }
                (f + gauss(*noise_std, rng) - offset) / scale
            }
            Mechanism::Sigmoid {
                parents,
                weights,
                noise_std,
            } => {
                parents.iter().zip(weights).map(|(&p, w)| w * sigmoid(row[p])).sum::<f64>() + gauss(*noise_std, rng)
            }
            Mechanism::Shift { base, delta } => base.eval(row, rng) + delta,
            Mechanism::Scale { base, factor } => factor * base.eval(row, rng),
        }
    }

    /// Parents the mechanism reads.
    pub fn parents(&self) -> &[usize] {
        match self {
            Mechanism::Root { .. } | Mechanism::Hard { .. } => &[],
            Mechanism::Linear { parents, .. }
            | Mechanism::NnAdditive { parents, .. }
            | Mechanism::NnNonAdditive { parents, .. }
            | Mechanism::Polynomial { parents, .. }
            | Mechanism::Sigmoid { parents, .. } => parents,
            Mechanism::Shift { base, .. } | Mechanism::Scale { base, .. } => base.parents(),
        }
    }
}

/// A DAG with one mechanism per node.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scm {
    pub family: Family,
    pub mechanisms: Vec<Mechanism>,
    #[serde(skip)]
    order: Vec<usize>,
}

impl Scm {
    pub fn n(&self) -> usize {
        self.mechanisms.len()
    }

    /// Fails when the parent lists form a cycle or point out of range.
    pub fn new(family: Family, mechanisms: Vec<Mechanism>) -> Result<Self> {
        let n = mechanisms.len();
        let edges = mechanisms
            .iter()
            .enumerate()
            .flat_map(|(j, m)| m.parents().iter().map(move |&p| (p, j)));
        let order = Dag::new(n, edges)?.topological_order().expect("acyclic");
        Ok(Self {
            family,
            mechanisms,
            order,
        })
    }

    /// The graph the mechanisms read from.
    pub fn dag(&self) -> Dag {
        let edges = self
            .mechanisms
            .iter()
            .enumerate()
            .flat_map(|(j, m)| m.parents().iter().map(move |&p| (p, j)));
        Dag::new(self.n(), edges).expect("mechanism graph is acyclic")
    }
}

/// Draws per-node parameters for `family` on `dag`. Nodes without parents
/// get the uniform root law.
pub fn instantiate_scm(dag: &Dag, family: Family, config: &MechanismConfig, seed: u64) -> Result<Scm> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let mechanisms = (0..dag.n())
        .map(|j| {
            let parents = dag.parents(j);
            let p = parents.len();
            if p == 0 {
                return Mechanism::Root {
                    low: config.root_low,
                    high: config.root_high,
                };
            }
            let noise_std = rng.gen_range(config.noise_std_low..=config.noise_std_high);
            match family {
                Family::Linear => Mechanism::Linear {
                    weights: config.weights(p, &mut rng),
                    parents,
                    noise_std,
                },
                Family::NnAdditive => Mechanism::NnAdditive {
                    w_in: config.weights(p * h, &mut rng),
                    w_out: config.weights(h, &mut rng),
                    parents,
                    noise_std,
                },
                Family::NnNonAdditive => Mechanism::NnNonAdditive {
                    w_in: config.weights((p + 1) * h, &mut rng),
                    w_out: config.weights(h, &mut rng),
                    parents,
                    noise_std,
                },
                Family::Polynomial => Mechanism::Polynomial {
                    w0: config.weight(&mut rng),
                    w1: config.weights(p, &mut rng),
                    w2: config.weights(p, &mut rng),
                    parents,
                    noise_std,
                    offset: 0.0,
                    scale: 1.0,
                },
                Family::Sigmoid => Mechanism::Sigmoid {
                    weights: config.weights(p, &mut rng),
                    parents,
                    noise_std,
                },
            }
        })
        .collect();
    let mut scm = Scm::new(family, mechanisms)?;
    if family == Family::Polynomial {
        standardize_polynomials(&mut scm, derive_seed(seed, 0x9071));
    }
    Ok(scm)
}

/// Rows of the pilot sample that fixes polynomial output standardization.
pub const PILOT_ROWS: usize = 50_000;

/// Sets each polynomial node's offset and scale to the mean and standard
/// deviation of its output over a pilot sample, in topological order so
/// parents are already standardized.
fn standardize_polynomials(scm: &mut Scm, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![vec![0.0; scm.n()]; PILOT_ROWS];
    for &j in &scm.order.clone() {
        let column: Vec<f64> = rows.iter().map(|row| scm.mechanisms[j].eval(row, &mut rng)).collect();
        let mean = column.iter().sum::<f64>() / PILOT_ROWS as f64;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (PILOT_ROWS as f64 - 1.0);
        let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        if let Mechanism::Polynomial { offset, scale, .. } = &mut scm.mechanisms[j] {
            *offset = mean;
            *scale = sd;
        }
        for (row, v) in rows.iter_mut().zip(column) {
            row[j] = match scm.mechanisms[j] {
                Mechanism::Polynomial { .. } => (v - mean) / sd,
                _ => v,
            };
        }
    }
}

/// Ancestral sampling of `m` rows; rows are independent draws.
pub fn sample_data(scm: &Scm, m: usize, seed: u64) -> DMatrix<f64> {
    let n = scm.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(m, n);
    let mut row = vec![0.0; n];
    for r in 0..m {
        for &j in &scm.order {
            row[j] = scm.mechanisms[j].eval(&row, &mut rng);
        }
        for (j, &v) in row.iter().enumerate() {
            out[(r, j)] = v;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    Hard,
    Shift,
    Scale,
}

impl InterventionKind {
    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::Hard => "hard",
            InterventionKind::Shift => "shift",
            InterventionKind::Scale => "scale",
        }
    }
}

/// What happens to one target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Intervention {
    Hard { low: f64, high: f64 },
    Shift { delta: f64 },
    Scale { factor: f64 },
}

impl Intervention {
    pub fn kind(&self) -> InterventionKind {
        match self {
            Intervention::Hard { .. } => InterventionKind::Hard,
            Intervention::Shift { .. } => InterventionKind::Shift,
            Intervention::Scale { .. } => InterventionKind::Scale,
        }
    }

    /// Hard: `U(−1, 1)`. Shift: `sign(z)·z₁`. Scale: `z₁^sign(z)`.
    /// Here `z₁ ~ U(2, 4)` and `z ~ U(−1, 1)`.
    pub fn sample(kind: InterventionKind, rng: &mut impl Rng) -> Self {
        match kind {
            InterventionKind::Hard => Intervention::Hard { low: -1.0, high: 1.0 },
            InterventionKind::Shift | InterventionKind::Scale => {
                let z1 = rng.gen_range(2.0..4.0);
                let z: f64 = rng.gen_range(-1.0..1.0);
                let up = z >= 0.0;
                if kind == InterventionKind::Shift {
                    Intervention::Shift {
                        delta: if up { z1 } else { -z1 },
                    }
                } else {
                    Intervention::Scale {
                        factor: if up { z1 } else { 1.0 / z1 },
                    }
                }
            }
        }
    }
}

/// Target set with one intervention per target, in ascending target order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub targets: Vec<usize>,
    pub interventions: Vec<Intervention>,
}

impl Regime {
    pub fn new(targets: Vec<usize>, interventions: Vec<Intervention>) -> Result<Self> {
        if targets.is_empty() || targets.len() > 3 {
            return param(format!("{} targets, expected 1 to 3", targets.len()));
        }
        if targets.len() != interventions.len() {
            return param("one intervention per target is required");
        }
        let mut pairs: Vec<(usize, Intervention)> = targets.into_iter().zip(interventions).collect();
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return param("repeated target");
        }
        for (_, i) in &pairs {
            if let Intervention::Scale { factor } = i {
                if !(*factor > 0.0) {
                    return param(format!("scale factor {factor} must be positive"));
                }
            }
        }
        let (targets, interventions) = pairs.into_iter().unzip();
        Ok(Self { targets, interventions })
    }

    /// Same kind on every target, parameters drawn per target.
    pub fn sample(targets: Vec<usize>, kind: InterventionKind, rng: &mut impl Rng) -> Result<Self> {
        let interventions = targets.iter().map(|_| Intervention::sample(kind, rng)).collect();
        Self::new(targets, interventions)
    }

    pub fn indicator(&self, n: usize) -> Vec<bool> {
        let mut v = vec![false; n];
        for &t in &self.targets {
            v[t] = true;
        }
        v
    }
}

/// Applies `regime` to `scm`. Returns the intervened model and its graph:
/// hard targets lose their incoming edges, soft targets keep them.
pub fn mutilate(scm: &Scm, regime: &Regime) -> Result<(Scm, Dag)> {
    if regime.targets.is_empty() {
        return param("empty target set");
    }
    let mut mechanisms = scm.mechanisms.clone();
    for (&t, iv) in regime.targets.iter().zip(&regime.interventions) {
        if t >= scm.n() {
            return param(format!("target {t} out of range for {} nodes", scm.n()));
        }
        let base = Box::new(mechanisms[t].clone());
        mechanisms[t] = match *iv {
            Intervention::Hard { low, high } => Mechanism::Hard { low, high },
            Intervention::Shift { delta } => Mechanism::Shift { base, delta },
            Intervention::Scale { factor } => Mechanism::Scale { base, factor },
        };
    }
    let out = Scm::new(scm.family, mechanisms)?;
    let dag = out.dag();
    Ok((out, dag))
}

/// `3n` distinct target sets: `n` each of sizes 1, 2 and 3.
pub fn regime_schedule(n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n < 4 {
        return param(format!("{n} nodes cannot host {n} distinct 3-target sets"));
    }
    let mut out = Vec::with_capacity(3 * n);
    let nodes: Vec<usize> = (0..n).collect();
    for size in 1..=3 {
        let mut seen = BTreeSet::new();
        while seen.len() < n {
            let mut set: Vec<usize> = nodes.choose_multiple(rng, size).copied().collect();
            set.sort_unstable();
            if seen.insert(set.clone()) {
                out.push(set);
            }
        }
    }
    Ok(out)
}
