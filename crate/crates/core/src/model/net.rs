use cdn_nn::layers::{AxialBlock, AxialConfig, FeedForward, LayerNorm, Linear, SelfAttention};
use cdn_nn::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, SideTokens, Variant, NOT_COVERED};
use crate::error::{param, CoreError, Result};

/// Score offset that removes padded token slots from attention.
const MASKED: f64 = -1e9;

/// Layer layout of the network. Parameter values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Cdn {
    pub config: ModelConfig,
    node_table: String,
    code_table: String,
    rho_proj: Linear,
    pair_ffn: FeedForward,
    pool_norm: LayerNorm,
    pool_attn: SelfAttention,
    structure: Vec<AxialBlock>,
    structure_norm: LayerNorm,
    edge_head: FeedForward,
    stats_ffn: FeedForward,
    diff: Vec<AxialBlock>,
    target_head: Linear,
}

/// Graph handles of one forward pass over a pair.
#[derive(Clone, Copy, Debug)]
pub struct Output {
    /// `[N(N−1)/2, 3]` logits per unordered pair `i < j`.
    pub edge_obs: Var,
    pub edge_int: Var,
    /// `[N]` target logits.
    pub target: Var,
    /// `[N, N, d]` pair representations.
    pub h_obs: Var,
    pub h_int: Var,
}

fn pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ij = Vec::new();
    let mut ji = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            ij.push(i * n + j);
            ji.push(j * n + i);
        }
    }
    (ij, ji)
}

impl Cdn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let axial = |dim| AxialConfig {
            dim,
            heads: config.heads,
            ffn_mult: config.ffn_mult,
            dropout: config.dropout,
        };
        let w = config.diff_width();
        Ok(Self {
            node_table: "embed.node".into(),
            code_table: "embed.code".into(),
            rho_proj: Linear::new("embed.rho", 1, d, true),
            pair_ffn: FeedForward::new("embed.pair", 2 * d, d, d),
            pool_norm: LayerNorm::new("pool.norm", d),
            pool_attn: SelfAttention::new("pool.attn", d, config.heads),
            structure: (0..config.structure_layers)
                .map(|l| AxialBlock::new(&format!("structure.{l}"), axial(d)))
                .collect(),
            structure_norm: LayerNorm::new("structure.norm", d),
            edge_head: FeedForward::new("edge", 2 * d, d, 3),
            stats_ffn: FeedForward::new("diff.stats", 2, d, d),
            diff: (0..config.diff_layers()).map(|l| AxialBlock::new(&format!("diff.{l}"), axial(w))).collect(),
            target_head: Linear::new("target", w, 1, true),
            config,
        })
    }

    /// Fresh parameters from `seed`.
    pub fn init<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = self.config.dim;
        s.init_embedding(&self.node_table, self.config.n_max, d, &mut rng);
        s.init_embedding(&self.code_table, NOT_COVERED + 1, d, &mut rng);
        self.rho_proj.init(&mut s, &mut rng);
        self.pair_ffn.init(&mut s, &mut rng);
        self.pool_norm.init(&mut s);
        self.pool_attn.init(&mut s, &mut rng);
        for b in &self.structure {
            b.init(&mut s, &mut rng);
        }
        self.structure_norm.init(&mut s);
        self.edge_head.init(&mut s, &mut rng);
        self.stats_ffn.init(&mut s, &mut rng);
        for b in &self.diff {
            b.init(&mut s, &mut rng);
        }
        self.target_head.init(&mut s, &mut rng);
        s
    }

    fn check_perm(&self, n: usize, perm: &[usize]) -> Result<()> {
        if perm.len() != n {
            return param(format!("permutation of length {} for N={n}", perm.len()));
        }
        if perm.iter().any(|&p| p >= self.config.n_max) {
            return param(format!("permutation exceeds the {} embedding rows", self.config.n_max));
        }
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return param("permutation repeats an embedding row");
        }
        Ok(())
    }

    /// `FFN([E(perm i), E(perm j)])` as `[N, N, d]`.
    pub fn pair_embedding<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, perm: &[usize]) -> Result<Var> {
        let n = perm.len();
        let table = g.param(store, &self.node_table)?;
        let e = g.gather(table, perm)?;
        let rows = g.broadcast(e, 1, n)?;
        let cols = g.broadcast(e, 0, n)?;
        let both = g.concat(&[rows, cols], 2)?;
        Ok(self.pair_ffn.forward(g, store, both)?)
    }

    /// The token lattice `[N·N, len, d]`, with the pair embedding added.
    pub fn embed<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, side: &SideTokens, pair: Var) -> Result<Var> {
        let (n, len, d) = (side.n, side.len, self.config.dim);
        let rho = g.constant(Tensor::from_f64(&[n * n, 1], &side.rho)?);
        let rho = self.rho_proj.forward(g, store, rho)?;
        let rho = g.reshape(rho, &[n * n, 1, d])?;
        let table = g.param(store, &self.code_table)?;
        let codes = g.gather(table, &side.codes)?;
        let codes = g.reshape(codes, &[n * n, len - 1, d])?;
        let tokens = g.concat(&[rho, codes], 1)?;
        let pair = g.reshape(pair, &[n * n, d])?;
        let pair = g.broadcast(pair, 1, len)?;
        Ok(g.add(tokens, pair)?)
    }

    /// Attention over each pair's tokens, then the count-weighted mean,
    /// giving `[N, N, d]`.
    pub fn pool<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, side: &SideTokens, tokens: Var) -> Result<Var> {
        let (n, len, d, heads) = (side.n, side.len, self.config.dim, self.config.heads);
        let mut bias = Vec::with_capacity(n * n * heads * len * len);
        for p in 0..n * n {
            let counts = &side.counts[p * len..(p + 1) * len];
            for _ in 0..heads * len {
                bias.extend(counts.iter().map(|&c| if c > 0.0 { c.ln() } else { MASKED }));
            }
        }
        let bias = g.constant(Tensor::from_f64(&[n * n * heads, len, len], &bias)?);
        let normed = self.pool_norm.forward(g, store, tokens)?;
        let a = self.pool_attn.attend(g, store, normed, Some(bias))?;
        let a = g.dropout(a, self.config.dropout)?;
        let tokens = g.add(tokens, a)?;
        let total = (side.t + 1) as f64;
        let weights: Vec<f64> = side.counts.iter().map(|c| c / total).collect();
        let weights = g.constant(Tensor::from_f64(&[n * n, 1, len], &weights)?);
        let pooled = g.bmm(weights, tokens, false, false)?;
        Ok(g.reshape(pooled, &[n, n, d])?)
    }

    /// Pair representations `[N, N, d]` and edge logits `[N(N−1)/2, 3]`.
    ///
    /// The head scores both orientations of a pair and adds them with the
    /// two directed classes swapped, so relabeling nodes permutes the
    /// logits exactly.
    pub fn structure<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        side: &SideTokens,
        pair: Var,
    ) -> Result<(Var, Var)> {
        let n = side.n;
        let tokens = self.embed(g, store, side, pair)?;
        let mut h = self.pool(g, store, side, tokens)?;
        for b in &self.structure {
            h = b.forward(g, store, h)?;
        }
        let h = self.structure_norm.forward(g, store, h)?;
        let ht = g.permute(h, &[1, 0, 2])?;
        let both = g.concat(&[h, ht], 2)?;
        let u = self.edge_head.forward(g, store, both)?;
        let u = g.reshape(u, &[n * n, 3])?;
        let (ij, ji) = pair_indices(n);
        let forward = g.gather(u, &ij)?;
        let backward = g.gather(u, &ji)?;
        let swap = g.constant(Tensor::from_f64(&[3, 3], &[0., 1., 0., 1., 0., 0., 0., 0., 1.])?);
        let backward = g.matmul(backward, swap)?;
        let logits = g.add(forward, backward)?;
        Ok((h, logits))
    }

    fn with_stats<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, h: Var, moments: &[f64]) -> Result<Var> {
        let n = moments.len() / 2;
        let m = g.constant(Tensor::from_f64(&[n, 2], moments)?);
        let s = self.stats_ffn.forward(g, store, m)?;
        let width = g.shape(s)[1];
        let s = g.reshape(s, &[n, 1, width])?;
        Ok(g.concat(&[h, s], 1)?)
    }

    /// Target logits `[N]` from both sides' pair representations.
    pub fn compare<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h_obs: Var,
        h_int: Var,
        moments_obs: &[f64],
        moments_int: &[f64],
    ) -> Result<Var> {
        if g.shape(h_obs) != g.shape(h_int) || moments_obs.len() != moments_int.len() {
            return Err(CoreError::Shape(format!(
                "sides {:?} and {:?}",
                g.shape(h_obs),
                g.shape(h_int)
            )));
        }
        let n = g.shape(h_obs)[0];
        let obs = self.with_stats(g, store, h_obs, moments_obs)?;
        let int = self.with_stats(g, store, h_int, moments_int)?;
        let mut x = match self.config.variant {
            Variant::Diff => g.sub(int, obs)?,
            Variant::Cat => g.concat(&[obs, int], 2)?,
        };
        if g.shape(x)[2] != self.config.diff_width() {
            return param(format!("comparison width {} for the {:?} variant", g.shape(x)[2], self.config.variant));
        }
        for b in &self.diff {
            x = b.forward(g, store, x)?;
        }
        let pooled = g.mean(x, 1)?;
        let logits = self.target_head.forward(g, store, pooled)?;
        Ok(g.reshape(logits, &[n])?)
    }

    /// Full forward pass over a pair, both sides sharing `perm`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        obs: &SideTokens,
        int: &SideTokens,
        perm: &[usize],
    ) -> Result<Output> {
        if obs.n != int.n {
            return Err(CoreError::Shape(format!("N={} vs N={}", obs.n, int.n)));
        }
        self.check_perm(obs.n, perm)?;
        let pair = self.pair_embedding(g, store, perm)?;
        let (h_obs, edge_obs) = self.structure(g, store, obs, pair)?;
        let (h_int, edge_int) = self.structure(g, store, int, pair)?;
        let target = self.compare(g, store, h_obs, h_int, &obs.moments, &int.moments)?;
        Ok(Output {
            edge_obs,
            edge_int,
            target,
            h_obs,
            h_int,
        })
    }

    /// `(L_G, L_I, L)`: summed mean edge cross-entropies of both sides, the
    /// mean target cross-entropy, and their sum.
    pub fn losses<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        out: &Output,
        labels_obs: &[usize],
        labels_int: &[usize],
        targets: &[f64],
    ) -> Result<(Var, Var, Var)> {
        let ce_obs = g.softmax_cross_entropy(out.edge_obs, labels_obs)?;
        let ce_int = g.softmax_cross_entropy(out.edge_int, labels_int)?;
        let lg = g.add(ce_obs, ce_int)?;
        let li = g.bce_with_logits(out.target, targets)?;
        let l = g.add(lg, li)?;
        Ok((lg, li, l))
    }
}

/// Row-wise softmax of `[P, 3]` logits.
pub fn edge_probabilities(logits: &[f64]) -> Vec<[f64; 3]> {
    logits
        .chunks(3)
        .map(|z| {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
            let s = e[0] + e[1] + e[2];
            [e[0] / s, e[1] / s, e[2] / s]
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
