//! FCI on small variable subsets.
//!
//! [`fci`] runs the skeleton search, Possible-D-SEP pruning, collider
//! orientation and orientation rules R1 to R4 against any [`CiTest`].
//! [`local_estimates`] draws `T` subsets of `k` variables and runs FCI on
//! each, giving the sparse edge-mark lattice the model consumes.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::scm::{derive_seed, Dag};
use crate::stats::{fisher_z_from_rho, summary_stats};

/// Largest subset FCI accepts.
pub const MAX_SUBSET: usize = 8;

/// Endpoint mark. The discriminants are the on-disk codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Mark {
    None = 0,
    Circle = 1,
    Arrow = 2,
    Tail = 3,
}

impl Mark {
    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Mark::None),
            1 => Some(Mark::Circle),
            2 => Some(Mark::Arrow),
            3 => Some(Mark::Tail),
            _ => None,
        }
    }
}

/// Number of distinct ordered mark pairs.
pub const PAIR_CODES: usize = 16;

/// Partial ancestral graph on `k` local variables. `mark(i, j)` is the mark
/// at `j`'s end of the edge between `i` and `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pag {
    k: usize,
    marks: Vec<Mark>,
}

impl Pag {
    pub fn empty(k: usize) -> Self {
        Self {
            k,
            marks: vec![Mark::None; k * k],
        }
    }

    /// Complete graph with circles on every endpoint.
    pub fn complete(k: usize) -> Self {
        let mut p = Self::empty(k);
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    p.marks[i * k + j] = Mark::Circle;
                }
            }
        }
        p
    }

    pub fn from_codes(k: usize, codes: &[u8]) -> Option<Self> {
        if codes.len() != k * k {
            return None;
        }
        let marks = codes.iter().map(|&c| Mark::from_code(c)).collect::<Option<Vec<_>>>()?;
        Some(Self { k, marks })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mark(&self, i: usize, j: usize) -> Mark {
        self.marks[i * self.k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, m: Mark) {
        self.marks[i * self.k + j] = m;
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.mark(i, j) != Mark::None
    }

    pub fn remove(&mut self, i: usize, j: usize) {
        self.set(i, j, Mark::None);
        self.set(j, i, Mark::None);
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.k).filter(|&j| self.adjacent(i, j)).collect()
    }

    /// Row-major mark codes.
    pub fn codes(&self) -> Vec<u8> {
        self.marks.iter().map(|&m| m as u8).collect()
    }

    /// `4·(mark at i) + (mark at j)` for the ordered pair `(i, j)`.
    pub fn pair_code(&self, i: usize, j: usize) -> u8 {
        4 * self.mark(j, i) as u8 + self.mark(i, j) as u8
    }

    /// `i → j`.
    fn directed(&self, i: usize, j: usize) -> bool {
        self.mark(i, j) == Mark::Arrow && self.mark(j, i) == Mark::Tail
    }

    /// Undirected skeleton edges `(i, j)` with `i < j`.
    pub fn skeleton(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..self.k {
            for j in i + 1..self.k {
                if self.adjacent(i, j) {
                    out.insert((i, j));
                }
            }
        }
        out
    }
}

/// Conditional independence oracle over `k` local variables.
pub trait CiTest {
    fn k(&self) -> usize;
    fn independent(&self, i: usize, j: usize, s: &[usize]) -> bool;
}

/// Fisher z test on a correlation matrix.
#[derive(Clone, Debug)]
pub struct FisherZ {
    pub rho: DMatrix<f64>,
    pub m: usize,
    pub alpha: f64,
}

impl FisherZ {
    pub fn from_data(d: &DMatrix<f64>, alpha: f64) -> Result<Self> {
        let st = summary_stats(d)?;
        Ok(Self {
            rho: st.rho,
            m: st.m,
            alpha,
        })
    }

    /// The test restricted to `vars`, in that order.
    pub fn restricted(&self, vars: &[usize]) -> Self {
        let k = vars.len();
        Self {
            rho: DMatrix::from_fn(k, k, |a, b| self.rho[(vars[a], vars[b])]),
            m: self.m,
            alpha: self.alpha,
        }
    }
}

impl CiTest for FisherZ {
    fn k(&self) -> usize {
        self.rho.nrows()
    }

    fn independent(&self, i: usize, j: usize, s: &[usize]) -> bool {
        if s.len() + 4 > self.m {
            return false;
        }
        fisher_z_from_rho(&self.rho, self.m, i, j, s, self.alpha).independent
    }
}

/// d-separation in a DAG; nodes outside `observed` are latent.
#[derive(Clone, Debug)]
pub struct DSeparation<'a> {
    pub dag: &'a Dag,
    pub observed: Vec<usize>,
}

impl CiTest for DSeparation<'_> {
    fn k(&self) -> usize {
        self.observed.len()
    }

    fn independent(&self, i: usize, j: usize, s: &[usize]) -> bool {
        let z: Vec<usize> = s.iter().map(|&v| self.observed[v]).collect();
        self.dag.d_separated(self.observed[i], self.observed[j], &z)
    }
}

/// Subsets of `items` of size `size`, in lexicographic order.
fn combinations(items: &[usize], size: usize) -> Vec<Vec<usize>> {
    fn go(items: &[usize], size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        let need = size - cur.len();
        for (x, &v) in items.iter().enumerate() {
            if items.len() - x < need {
                break;
            }
            cur.push(v);
            go(&items[x + 1..], size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(items, size, &mut Vec::with_capacity(size), &mut out);
    out
}

type SepSets = BTreeMap<(usize, usize), Vec<usize>>;

fn key(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

/// Order-independent skeleton: adjacency sets are frozen per level.
fn skeleton(test: &impl CiTest, pag: &mut Pag, sepsets: &mut SepSets) {
    let k = pag.k();
    let mut level = 0;
    loop {
        let frozen: Vec<Vec<usize>> = (0..k).map(|i| pag.neighbors(i)).collect();
        if !frozen.iter().any(|a| a.len() > level) {
            break;
        }
        for i in 0..k {
            for &j in &frozen[i] {
                if !pag.adjacent(i, j) {
                    continue;
                }
                let candidates: Vec<usize> = frozen[i].iter().copied().filter(|&v| v != j).collect();
                for s in combinations(&candidates, level) {
                    if test.independent(i, j, &s) {
                        pag.remove(i, j);
                        sepsets.insert(key(i, j), s);
                        break;
                    }
                }
            }
        }
        level += 1;
    }
}

fn orient_colliders(pag: &mut Pag, sepsets: &SepSets) {
    let k = pag.k();
    let mut arrows = Vec::new();
    for c in 0..k {
        let nb = pag.neighbors(c);
        for (x, &a) in nb.iter().enumerate() {
            for &b in &nb[x + 1..] {
                if pag.adjacent(a, b) {
                    continue;
                }
                let sep = sepsets.get(&key(a, b)).map_or(&[][..], Vec::as_slice);
                if !sep.contains(&c) {
                    arrows.push((a, c));
                    arrows.push((b, c));
                }
            }
        }
    }
    for (a, c) in arrows {
        pag.set(a, c, Mark::Arrow);
    }
}

/// Nodes reachable from `x` along paths whose inner nodes are colliders or
/// sit in a triangle with their path neighbors.
fn possible_d_sep(pag: &Pag, x: usize) -> Vec<usize> {
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut stack: Vec<(usize, usize)> = pag.neighbors(x).into_iter().map(|v| (x, v)).collect();
    let mut out = BTreeSet::new();
    while let Some((prev, cur)) = stack.pop() {
        if !seen.insert((prev, cur)) {
            continue;
        }
        out.insert(cur);
        for next in pag.neighbors(cur) {
            if next == prev || next == x {
                continue;
            }
            let collider = pag.mark(prev, cur) == Mark::Arrow && pag.mark(next, cur) == Mark::Arrow;
            if collider || pag.adjacent(prev, next) {
                stack.push((cur, next));
            }
        }
    }
    out.remove(&x);
    out.into_iter().collect()
}

fn pdsep_prune(test: &impl CiTest, pag: &mut Pag, sepsets: &mut SepSets) {
    let k = pag.k();
    let pds: Vec<Vec<usize>> = (0..k).map(|i| possible_d_sep(pag, i)).collect();
    for i in 0..k {
        for j in i + 1..k {
            if !pag.adjacent(i, j) {
                continue;
            }
            'pair: for (a, b) in [(i, j), (j, i)] {
                let cand: Vec<usize> = pds[a].iter().copied().filter(|&v| v != b).collect();
                for size in 1..=cand.len() {
                    for s in combinations(&cand, size) {
                        if test.independent(a, b, &s) {
                            pag.remove(i, j);
                            sepsets.insert(key(i, j), s);
                            break 'pair;
                        }
                    }
                }
            }
        }
    }
}

fn rule1(pag: &mut Pag) -> bool {
    let k = pag.k();
    for b in 0..k {
        for a in pag.neighbors(b) {
            if pag.mark(a, b) != Mark::Arrow {
                continue;
            }
            for c in pag.neighbors(b) {
                if c == a || pag.adjacent(a, c) || pag.mark(c, b) != Mark::Circle {
                    continue;
                }
                pag.set(b, c, Mark::Arrow);
                pag.set(c, b, Mark::Tail);
                return true;
            }
        }
    }
    false
}

fn rule2(pag: &mut Pag) -> bool {
    let k = pag.k();
    for a in 0..k {
        for c in pag.neighbors(a) {
            if pag.mark(a, c) != Mark::Circle {
                continue;
            }
            let fires = pag.neighbors(a).into_iter().any(|b| {
                b != c
                    && pag.adjacent(b, c)
                    && ((pag.directed(a, b) && pag.mark(b, c) == Mark::Arrow)
                        || (pag.mark(a, b) == Mark::Arrow && pag.directed(b, c)))
            });
            if fires {
                pag.set(a, c, Mark::Arrow);
                return true;
            }
        }
    }
    false
}

fn rule3(pag: &mut Pag) -> bool {
    let k = pag.k();
    for d in 0..k {
        for b in pag.neighbors(d) {
            if pag.mark(d, b) != Mark::Circle {
                continue;
            }
            let parents: Vec<usize> = pag
                .neighbors(b)
                .into_iter()
                .filter(|&v| v != d && pag.mark(v, b) == Mark::Arrow && pag.adjacent(v, d) && pag.mark(v, d) == Mark::Circle)
                .collect();
            for (x, &a) in parents.iter().enumerate() {
                for &c in &parents[x + 1..] {
                    if !pag.adjacent(a, c) {
                        pag.set(d, b, Mark::Arrow);
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn rule4(test: &impl CiTest, pag: &mut Pag, sepsets: &mut SepSets) -> bool {
    let k = pag.k();
    for b in 0..k {
        for c in pag.neighbors(b) {
            if pag.mark(c, b) != Mark::Circle {
                continue;
            }
            for a in pag.neighbors(b) {
                if a == c || !pag.directed(a, c) || pag.mark(b, a) != Mark::Arrow {
                    continue;
                }
                if let Some(theta) = discriminating_end(pag, a, b, c) {
                    let sep = match sepsets.get(&key(theta, c)) {
                        Some(s) => s.clone(),
                        None => {
                            // the pair was never separated: find a set now
                            match find_sepset(test, pag, theta, c) {
                                Some(s) => {
                                    sepsets.insert(key(theta, c), s.clone());
                                    s
                                }
                                None => continue,
                            }
                        }
                    };
                    if sep.contains(&b) {
                        pag.set(c, b, Mark::Tail);
                        pag.set(b, c, Mark::Arrow);
                    } else {
                        pag.set(a, b, Mark::Arrow);
                        pag.set(b, a, Mark::Arrow);
                        pag.set(b, c, Mark::Arrow);
                        pag.set(c, b, Mark::Arrow);
                    }
                    return true;
                }
            }
        }
    }
    false
}

fn find_sepset(test: &impl CiTest, pag: &Pag, x: usize, y: usize) -> Option<Vec<usize>> {
    let others: Vec<usize> = (0..pag.k()).filter(|&v| v != x && v != y).collect();
    (0..=others.len()).find_map(|size| combinations(&others, size).into_iter().find(|s| test.independent(x, y, s)))
}

/// Searches backwards from `a` for the far end θ of a discriminating path
/// `⟨θ, …, a, b, c⟩` for `b`.
fn discriminating_end(pag: &Pag, a: usize, b: usize, c: usize) -> Option<usize> {
    // each frontier entry is a path from b back to its last node; inner
    // nodes carry arrowheads from both path neighbors and point into c
    let mut queue = std::collections::VecDeque::from([vec![b, a]]);
    while let Some(path) = queue.pop_front() {
        let last = *path.last().unwrap();
        for next in pag.neighbors(last) {
            if next == c || path.contains(&next) || pag.mark(next, last) != Mark::Arrow {
                continue;
            }
            if !pag.adjacent(next, c) {
                return Some(next);
            }
            if pag.directed(next, c) && pag.mark(last, next) == Mark::Arrow {
                let mut p = path.clone();
                p.push(next);
                queue.push_back(p);
            }
        }
    }
    None
}

/// Applies R1 to R4 until none fires.
fn orient_rules(test: &impl CiTest, pag: &mut Pag, sepsets: &mut SepSets) {
    loop {
        let changed = rule1(pag) || rule2(pag) || rule3(pag) || rule4(test, pag, sepsets);
        if !changed {
            break;
        }
    }
}

/// FCI over the `k` variables of `test`.
pub fn fci(test: &impl CiTest) -> Result<Pag> {
    let k = test.k();
    if k > MAX_SUBSET {
        return param(format!("FCI is limited to {MAX_SUBSET} variables, got {k}"));
    }
    let mut pag = Pag::complete(k);
    let mut sepsets = SepSets::new();
    skeleton(test, &mut pag, &mut sepsets);
    orient_colliders(&mut pag, &sepsets);
    pdsep_prune(test, &mut pag, &mut sepsets);
    for i in 0..k {
        for j in 0..k {
            if i != j && pag.adjacent(i, j) {
                pag.set(i, j, Mark::Circle);
            }
        }
    }
    orient_colliders(&mut pag, &sepsets);
    orient_rules(test, &mut pag, &mut sepsets);
    Ok(pag)
}

/// Floor on the growth weights so every node stays reachable.
pub const SUBSET_WEIGHT_FLOOR: f64 = 1e-3;

/// Draws `t` subsets of `k` variables. Each starts from a uniform seed node
/// and grows by sampling, without replacement, with weight proportional to
/// the largest absolute correlation with the nodes chosen so far.
pub fn sample_subsets(rho: &DMatrix<f64>, k: usize, t: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let n = rho.nrows();
    if k == 0 || k > n {
        return param(format!("subset size {k} invalid for {n} variables"));
    }
    if t == 0 {
        return param("need at least one subset");
    }
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let mut chosen = vec![rng.gen_range(0..n)];
        let mut weight = vec![0.0f64; n];
        while chosen.len() < k {
            let last = *chosen.last().unwrap();
            for v in 0..n {
                weight[v] = weight[v].max(rho[(last, v)].abs().max(SUBSET_WEIGHT_FLOOR));
            }
            let total: f64 = (0..n).filter(|v| !chosen.contains(v)).map(|v| weight[v]).sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = None;
            for v in (0..n).filter(|v| !chosen.contains(v)) {
                pick = Some(v);
                if u < weight[v] {
                    break;
                }
                u -= weight[v];
            }
            chosen.push(pick.expect("k ≤ n leaves a candidate"));
        }
        chosen.sort_unstable();
        out.push(chosen);
    }
    Ok(out)
}

/// `T` FCI runs over sampled subsets of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEstimates {
    pub n: usize,
    pub k: usize,
    pub subsets: Vec<Vec<usize>>,
    pub pags: Vec<Pag>,
}

impl LocalEstimates {
    pub fn t(&self) -> usize {
        self.subsets.len()
    }

    /// Pair codes of `(i, j)` from every estimate whose subset holds both.
    pub fn pair_codes(&self, i: usize, j: usize) -> Vec<u8> {
        self.subsets
            .iter()
            .zip(&self.pags)
            .filter_map(|(s, p)| {
                let a = s.iter().position(|&v| v == i)?;
                let b = s.iter().position(|&v| v == j)?;
                Some(p.pair_code(a, b))
            })
            .collect()
    }

    /// Index from ordered pairs to `(estimate, pair code)` slots.
    pub fn pair_index(&self) -> BTreeMap<(usize, usize), Vec<(usize, u8)>> {
        let mut idx: BTreeMap<(usize, usize), Vec<(usize, u8)>> = BTreeMap::new();
        for (t, (s, p)) in self.subsets.iter().zip(&self.pags).enumerate() {
            for (a, &i) in s.iter().enumerate() {
                for (b, &j) in s.iter().enumerate() {
                    if a != b {
                        idx.entry((i, j)).or_default().push((t, p.pair_code(a, b)));
                    }
                }
            }
        }
        idx
    }
}

/// Samples subsets on the data's correlation matrix and runs FCI on each,
/// in parallel, collecting results in subset order.
pub fn local_estimates(d: &DMatrix<f64>, k: usize, t: usize, alpha: f64, seed: u64) -> Result<LocalEstimates> {
    let test = FisherZ::from_data(d, alpha)?;
    local_estimates_from(&test, k, t, seed)
}

pub fn local_estimates_from(test: &FisherZ, k: usize, t: usize, seed: u64) -> Result<LocalEstimates> {
    if k > MAX_SUBSET {
        return param(format!("FCI is limited to {MAX_SUBSET} variables, got {k}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5b5e7));
    let subsets = sample_subsets(&test.rho, k, t, &mut rng)?;
    let pags = subsets
        .par_iter()
        .map(|s| fci(&test.restricted(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalEstimates {
        n: test.rho.nrows(),
        k,
        subsets,
        pags,
    })
}
