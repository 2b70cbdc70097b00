//! Parameterized building blocks.
//!
//! A layer only holds parameter names and extents; the values live in a
//! [`ParamStore`]. `init` fills the store, `forward` records the layer on a
//! [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: bias.then(|| format!("{prefix}.bias")),
            in_dim,
            out_dim,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) {
        store.init_glorot(&self.weight, self.in_dim, self.out_dim, rng);
        if let Some(b) = &self.bias {
            store.init_const(b, &[self.out_dim], 0.0);
        }
    }

    /// Sets the weight (and bias) to zero.
    pub fn zero<F: Scalar>(&self, store: &mut ParamStore<F>) {
        store.init_const(&self.weight, &[self.in_dim, self.out_dim], 0.0);
        if let Some(b) = &self.bias {
            store.init_const(b, &[self.out_dim], 0.0);
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.param(store, b)?),
            None => None,
        };
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            dim,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>) {
        store.init_const(&self.gain, &[self.dim], 1.0);
        store.init_const(&self.bias, &[self.dim], 0.0);
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.gain)?;
        let bias = g.param(store, &self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer perceptron `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            hidden: Linear::new(&format!("{prefix}.fc1"), in_dim, hidden, true),
            output: Linear::new(&format!("{prefix}.fc2"), hidden, out_dim, true),
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) {
        self.hidden.init(store, rng);
        self.output.init(store, rng);
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.output.forward(g, store, h)
    }
}

/// Scaled dot-product self-attention over the middle axis of `[B, L, d]`.
///
/// Projections carry no bias. [`SelfAttention::attend`] returns the
/// projected attention output only; [`SelfAttention::forward`] adds the
/// residual, `h + Wo·(V·softmax(Kᵀ Q / √d_head))`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(&format!("{prefix}.wq"), dim, dim, false),
            key: Linear::new(&format!("{prefix}.wk"), dim, dim, false),
            value: Linear::new(&format!("{prefix}.wv"), dim, dim, false),
            out: Linear::new(&format!("{prefix}.wo"), dim, dim, false),
            dim,
            heads,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) {
        for l in [&self.query, &self.key, &self.value, &self.out] {
            l.init(store, rng);
        }
    }

    /// `bias`, when given, is added to the `[B·heads, L, L]` score tensor
    /// (query-major) before the softmax; use it for masks or key
    /// multiplicities.
    pub fn attend<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return shape_err("self_attention", format!("input {s:?}, width {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(NnError::Invalid(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let split = |g: &mut Graph<F>, t: Var| -> Result<Var> {
            if h == 1 {
                return Ok(t);
            }
            let t = g.reshape(t, &[b, l, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[b * h, l, dh])
        };
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.bmm(q, k, false, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = g.add(scores, bias)?;
        }
        let attn = g.softmax(scores, 2)?;
        let mut ctx = g.bmm(attn, v, false, false)?;
        if h > 1 {
            ctx = g.reshape(ctx, &[b, h, l, dh])?;
            ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            ctx = g.reshape(ctx, &[b, l, d])?;
        }
        self.out.forward(g, store, ctx)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let a = self.attend(g, store, x, None)?;
        g.add(x, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxialConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

/// Pre-norm residual attention along rows, then along columns, then a
/// pre-norm residual feed-forward, on a `[rows, cols, d]` lattice.
#[derive(Clone, Debug)]
pub struct AxialBlock {
    pub row_norm: LayerNorm,
    pub row_attn: SelfAttention,
    pub col_norm: LayerNorm,
    pub col_attn: SelfAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub config: AxialConfig,
}

impl AxialBlock {
    pub fn new(prefix: &str, config: AxialConfig) -> Self {
        let d = config.dim;
        Self {
            row_norm: LayerNorm::new(&format!("{prefix}.row_norm"), d),
            row_attn: SelfAttention::new(&format!("{prefix}.row_attn"), d, config.heads),
            col_norm: LayerNorm::new(&format!("{prefix}.col_norm"), d),
            col_attn: SelfAttention::new(&format!("{prefix}.col_attn"), d, config.heads),
            ffn_norm: LayerNorm::new(&format!("{prefix}.ffn_norm"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, config.ffn_mult * d, d),
            config,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) {
        self.row_norm.init(store);
        self.row_attn.init(store, rng);
        self.col_norm.init(store);
        self.col_attn.init(store, rng);
        self.ffn_norm.init(store);
        self.ffn.init(store, rng);
    }

    /// Zeroes the residual branches' output projections.
    pub fn zero_outputs<F: Scalar>(&self, store: &mut ParamStore<F>) {
        self.row_attn.out.zero(store);
        self.col_attn.out.zero(store);
        self.ffn.output.zero(store);
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.config.dim {
            return shape_err("axial_block", format!("input {s:?}, width {}", self.config.dim));
        }
        let p = self.config.dropout;
        // along rows: for each column, the sequence runs over row indices
        let t = g.permute(h, &[1, 0, 2])?;
        let n = self.row_norm.forward(g, store, t)?;
        let a = self.row_attn.attend(g, store, n, None)?;
        let a = g.dropout(a, p)?;
        let t = g.add(t, a)?;
        let h = g.permute(t, &[1, 0, 2])?;
        // along columns: rows are the batch
        let n = self.col_norm.forward(g, store, h)?;
        let a = self.col_attn.attend(g, store, n, None)?;
        let a = g.dropout(a, p)?;
        let h = g.add(h, a)?;
        let n = self.ffn_norm.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, n)?;
        let f = g.dropout(f, p)?;
        g.add(h, f)
    }
}

/// Convenience: a `[rows, cols, d]` constant built from a closure.
pub fn lattice<F: Scalar>(rows: usize, cols: usize, d: usize, f: impl FnMut(usize) -> F) -> Tensor<F> {
    Tensor::from_fn(&[rows, cols, d], f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize) -> AxialConfig {
        AxialConfig {
            dim: d,
            heads: 1,
            ffn_mult: 4,
            dropout: 0.0,
        }
    }

    #[test]
    fn zeroed_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let attn = SelfAttention::new("a", 6, 2);
        attn.init(&mut store, &mut rng);
        attn.out.zero(&mut store);
        let mut g = Graph::new(false, 0);
        let xt = Tensor::from_fn(&[2, 5, 6], |i| (i as f64).sin());
        let x = g.input(xt.clone());
        let y = attn.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), &xt);

        let block = AxialBlock::new("b", cfg(6));
        block.init(&mut store, &mut rng);
        block.zero_outputs(&mut store);
        let xt = lattice(3, 4, 6, |i| (i as f64 * 0.3).cos());
        let x = g.input(xt.clone());
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let attn = SelfAttention::new("a", 4, 1);
        attn.init(&mut store, &mut rng);
        let mut g = Graph::new(false, 0);
        let xt = Tensor::from_f64(&[1, 1, 4], &[0.5, -1.0, 2.0, 0.25]).unwrap();
        let x = g.input(xt.clone());
        let y = attn.forward(&mut g, &store, x).unwrap();
        // out = h + (h·Wv)·Wo when the only attention weight is 1
        let wv = store.get("a.wv.weight").unwrap().data().to_vec();
        let wo = store.get("a.wo.weight").unwrap().data().to_vec();
        let h = xt.data();
        let v: Vec<f64> = (0..4).map(|j| (0..4).map(|i| h[i] * wv[i * 4 + j]).sum()).collect();
        for j in 0..4 {
            let o: f64 = (0..4).map(|i| v[i] * wo[i * 4 + j]).sum();
            assert!((g.value(y).data()[j] - (h[j] + o)).abs() < 1e-12);
        }
    }

    #[test]
    fn axial_block_is_row_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let block = AxialBlock::new("b", cfg(8));
        block.init(&mut store, &mut rng);
        let (r, c, d) = (4, 3, 8);
        let xt = lattice(r, c, d, |i| ((i * 7919) % 113) as f64 / 50.0 - 1.0);
        let perm = [2, 0, 3, 1];
        let mut px = Tensor::zeros(&[r, c, d]);
        for (new_row, &old_row) in perm.iter().enumerate() {
            let n = c * d;
            px.data_mut()[new_row * n..(new_row + 1) * n]
                .copy_from_slice(&xt.data()[old_row * n..(old_row + 1) * n]);
        }
        let mut g = Graph::new(false, 0);
        let x = g.input(xt);
        let y = block.forward(&mut g, &store, x).unwrap();
        let x2 = g.input(px);
        let y2 = block.forward(&mut g, &store, x2).unwrap();
        let n = c * d;
        for (new_row, &old_row) in perm.iter().enumerate() {
            for k in 0..n {
                let a = g.value(y).data()[old_row * n + k];
                let b = g.value(y2).data()[new_row * n + k];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
