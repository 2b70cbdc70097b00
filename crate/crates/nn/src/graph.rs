//! Operation tape and reverse-mode differentiation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, w: Var },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var },
    Scale { x: Var, c: F },
    Broadcast { x: Var, axis: usize, count: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Mean { x: Var, axis: usize },
    Variance { x: Var, axis: usize },
    SumAll(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Dropout { x: Var, mask: Vec<F> },
    Gather { table: Var, idx: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<F> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
}

/// A tape of tensor operations.
///
/// Values are computed eagerly as operations are recorded. After building a
/// scalar loss, [`Graph::backward`] fills gradient buffers for every value
/// that depends on a gradient-requiring leaf.
pub struct Graph<F: Scalar> {
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Vec<F>>>,
    ops: Vec<Op<F>>,
    requires: Vec<bool>,
    params: BTreeMap<String, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Graph<F> {
    /// `train` enables dropout; `seed` drives the dropout mask stream.
    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            params: BTreeMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds the named parameter from `store` as a gradient leaf. Repeated
    /// calls with the same name return the same handle.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.input(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every bound parameter, zero-filled where the loss does
    /// not depend on the parameter.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let shape = self.values[v.0].shape().to_vec();
                let data = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![F::zero(); self.values[v.0].len()]);
                (name.clone(), Tensor::new(shape, data).expect("grad shape"))
            })
            .collect()
    }

    // ----- forward operations -----

    /// `x: [.., k] · w: [k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return shape_err("matmul", format!("{xs:?} x {ws:?}"));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.values[x.0].len() / k.max(1);
        let mut out = vec![F::zero(); rows * n];
        F::gemm(
            rows,
            k,
            n,
            self.values[x.0].data(),
            false,
            self.values[w.0].data(),
            false,
            &mut out,
            false,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let req = self.req(x) || self.req(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a: x, w }, req))
    }

    /// `x·w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Batched product of `[B, ·, ·]` operands; `ta`/`tb` transpose the
    /// trailing two axes of the respective operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return shape_err("bmm", format!("{as_:?} x {bs:?}"));
        }
        let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (k2, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if k != k2 {
            return shape_err(
                "bmm",
                format!("{as_:?}{} x {bs:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }),
            );
        }
        let batch = as_[0];
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.values[a.0].data();
            let bd = self.values[b.0].data();
            for i in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
            req,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, rec: Op<F>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, data)?, rec, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b: [n]` to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return shape_err("add_bias", format!("{xs:?} + {bs:?}"));
        }
        let n = bs[0];
        let bias = self.values[b.0].data().to_vec();
        let data = self.values[x.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let req = self.req(x) || self.req(b);
        Ok(self.push(Tensor::new(xs, data)?, Op::AddBias { x, b }, req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::of(c);
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())?;
        let req = self.req(x);
        Ok(self.push(out, Op::Scale { x, c }, req))
    }

    /// Inserts a new axis of extent `count` at `axis`, repeating `x`.
    pub fn broadcast(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis > xs.len() {
            return shape_err("broadcast", format!("axis {axis} for {xs:?}"));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis..].iter().product();
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..count {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = xs;
        shape.insert(axis, count);
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Broadcast { x, axis, count }, req))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.values[v.0].data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let req = xs.iter().any(|&v| self.req(v));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            req,
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", format!("axes {axes:?} for {xs:?}"));
        }
        let data = permute_data(self.values[x.0].data(), &xs, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            req,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].clone().reshaped(shape)?;
        let req = self.req(x);
        Ok(self.push(t, Op::Reshape(x), req))
    }

    fn reduce_shape(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return shape_err(op, format!("axis {axis} for {xs:?}"));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let mut shape = xs;
        shape.remove(axis);
        Ok((shape, outer, len, inner))
    }

    /// Mean along `axis` (removed from the result).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape("mean", x, axis)?;
        let src = self.values[x.0].data();
        let inv = F::one() / F::of(len as f64);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        data.iter_mut().for_each(|d| *d = *d * inv);
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mean { x, axis }, req))
    }

    /// Population variance along `axis` (removed from the result).
    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape("variance", x, axis)?;
        let src = self.values[x.0].data();
        let inv = F::one() / F::of(len as f64);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + i];
                let mu = (0..len).map(at).sum::<F>() * inv;
                data[o * inner + i] = (0..len).map(|l| (at(l) - mu).powi(2)).sum::<F>() * inv;
            }
        }
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Variance { x, axis }, req))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().copied().sum();
        let req = self.req(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), req))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].len();
        if n == 0 {
            return shape_err("mean_all", "empty tensor");
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        let req = self.req(x);
        Ok(self.push(out, op, req))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return shape_err("softmax", format!("axis {axis} for {xs:?}"));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let src = self.values[x.0].data();
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    data[idx(l)] = data[idx(l)] / total;
                }
            }
        }
        let req = self.req(x);
        Ok(self.push(Tensor::new(xs, data)?, Op::Softmax { x, axis }, req))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of the last axis' extent).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().unwrap_or(&0);
        if n == 0 || self.shape(gain) != [n] || self.shape(bias) != [n] {
            return shape_err(
                "layer_norm",
                format!("{xs:?} with gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            );
        }
        let rows = self.values[x.0].len() / n;
        let src = self.values[x.0].data();
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let inv_n = F::one() / F::of(n as f64);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mu).powi(2)).sum::<F>() * inv_n;
            let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mu) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let req = self.req(x) || self.req(gain) || self.req(bias);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            req,
        ))
    }

    /// Inverted dropout. Identity when the graph is not in training mode or
    /// `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let n = self.values[x.0].len();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let t = &self.values[x.0];
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        let req = self.req(x);
        Ok(self.push(out, Op::Dropout { x, mask }, req))
    }

    /// Rows of `table: [R, d]` at `idx`, giving `[idx.len(), d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err("gather", format!("table {ts:?} must be 2-D"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= ts[0]) {
            return shape_err("gather", format!("index {bad} out of range for {ts:?}"));
        }
        let d = ts[1];
        let src = self.values[table.0].data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let req = self.req(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Alias of [`Graph::gather`] for lookup tables.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.gather(table, idx)
    }

    /// Mean binary cross-entropy of `logits` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.values[logits.0].data();
        if z.len() != targets.len() || z.is_empty() {
            return shape_err(
                "bce_with_logits",
                format!("{:?} logits vs {} targets", self.shape(logits), targets.len()),
            );
        }
        let total: F = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| {
                let t = F::of(t);
                z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln()
            })
            .sum();
        let loss = total / F::of(z.len() as f64);
        let req = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.iter().map(|&t| F::of(t)).collect(),
            },
            req,
        ))
    }

    /// Mean categorical cross-entropy of `logits: [B, C]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 || labels.iter().any(|&l| l >= s[1]) {
            return shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            );
        }
        let (b, c) = (s[0], s[1]);
        let z = self.values[logits.0].data();
        let mut probs = vec![F::zero(); b * c];
        let mut total = F::zero();
        for r in 0..b {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            total = total + lse - row[labels[r]];
        }
        let req = self.req(logits);
        Ok(self.push(
            Tensor::scalar(total / F::of(b as f64)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            req,
        ))
    }

    // ----- reverse pass -----

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[F]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let req = &self.requires;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, w } => {
                let (a, w) = (*a, *w);
                let ws = values[w.0].shape().to_vec();
                let (k, n) = (ws[0], ws[1]);
                let rows = g.len() / n.max(1);
                if req[a.0] {
                    let wv = values[w.0].data();
                    let ga = acc(grads, req, values, a).unwrap();
                    F::gemm(rows, n, k, g, false, &wv, true, ga, true);
                }
                if req[w.0] {
                    let av = values[a.0].data();
                    let gw = acc(grads, req, values, w).unwrap();
                    F::gemm(k, rows, n, &av, true, g, false, gw, true);
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let as_ = values[a.0].shape().to_vec();
                let bs = values[b.0].shape().to_vec();
                let batch = as_[0];
                let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
                let n = if tb { bs[1] } else { bs[2] };
                if req[a.0] {
                    let bv = values[b.0].data();
                    let ga = acc(grads, req, values, a).unwrap();
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bsl = &bv[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if ta {
                            // dAᵀ = B·Gᵀ : [k, m]
                            F::gemm(k, n, m, bsl, tb, gs, true, out, true);
                        } else {
                            // dA = G·Bᵀ : [m, k]
                            F::gemm(m, n, k, gs, false, bsl, !tb, out, true);
                        }
                    }
                }
                if req[b.0] {
                    let av = values[a.0].data();
                    let gb = acc(grads, req, values, b).unwrap();
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let asl = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if tb {
                            // dBᵀ = Gᵀ·A : [n, k]
                            F::gemm(n, m, k, gs, true, asl, ta, out, true);
                        } else {
                            // dB = Aᵀ·G : [k, n]
                            F::gemm(k, m, n, asl, !ta, gs, false, out, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(grads, req, values, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(gv) = acc(grads, req, values, *a) {
                    add_into(gv, g);
                }
                if let Some(gv) = acc(grads, req, values, *b) {
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if req[a.0] {
                    let bv = values[b.0].data();
                    let ga = acc(grads, req, values, a).unwrap();
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + s * o;
                    }
                }
                if req[b.0] {
                    let av = values[a.0].data();
                    let gb = acc(grads, req, values, b).unwrap();
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::AddBias { x, b } => {
                if let Some(gx) = acc(grads, req, values, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc(grads, req, values, *b) {
                    let n = gb.len();
                    for (i, &s) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + s;
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                if let Some(gx) = acc(grads, req, values, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * c);
                }
            }
            Op::Broadcast { x, axis, count } => {
                let (axis, count) = (*axis, *count);
                let xs = values[x.0].shape().to_vec();
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis..].iter().product();
                if let Some(gx) = acc(grads, req, values, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[o * inner..(o + 1) * inner];
                        for c in 0..count {
                            let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                            add_into(dst, src);
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let first = values[xs[0].0].shape().to_vec();
                let outer: usize = first[..axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total: usize = xs.iter().map(|&v| values[v.0].shape()[axis]).sum();
                let mut offset = 0;
                for &v in xs {
                    let len = values[v.0].shape()[axis] * inner;
                    if let Some(gv) = acc(grads, req, values, v) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                            add_into(&mut gv[o * len..(o + 1) * len], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Permute { x, axes } => {
                let out_shape: Vec<usize> = {
                    let xs = values[x.0].shape();
                    axes.iter().map(|&a| xs[a]).collect()
                };
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let back = permute_data(g, &out_shape, &inv);
                if let Some(gx) = acc(grads, req, values, *x) {
                    add_into(gx, &back);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(grads, req, values, *x) {
                    add_into(gx, g);
                }
            }
            Op::Mean { x, axis } => {
                let xs = values[x.0].shape().to_vec();
                let (outer, len, inner) = split_axis(&xs, *axis);
                let inv = F::one() / F::of(len as f64);
                if let Some(gx) = acc(grads, req, values, *x) {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s * inv);
                        }
                    }
                }
            }
            Op::Variance { x, axis } => {
                let xs = values[x.0].shape().to_vec();
                let (outer, len, inner) = split_axis(&xs, *axis);
                let inv = F::one() / F::of(len as f64);
                let two = F::of(2.0);
                let xv = values[x.0].data();
                if let Some(gx) = acc(grads, req, values, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let mu = (0..len).map(|l| xv[idx(l)]).sum::<F>() * inv;
                            let gs = g[o * inner + i];
                            for l in 0..len {
                                gx[idx(l)] = gx[idx(l)] + gs * two * (xv[idx(l)] - mu) * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let s = g[0];
                if let Some(gx) = acc(grads, req, values, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::Relu(x) => {
                let xv = values[x.0].data();
                if let Some(gx) = acc(grads, req, values, *x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = values[i].data();
                if let Some(gx) = acc(grads, req, values, *x) {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + s * (F::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = values[i].data();
                if let Some(gx) = acc(grads, req, values, *x) {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + s * y * (F::one() - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let xs = values[x.0].shape().to_vec();
                let (outer, len, inner) = split_axis(&xs, *axis);
                let y = values[i].data();
                if let Some(gx) = acc(grads, req, values, *x) {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + c;
                            let dot: F = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] = gx[idx(l)] + y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *values[x.0].shape().last().unwrap();
                let rows = rstd.len();
                let gv = values[gain.0].data();
                if let Some(gg) = acc(grads, req, values, *gain) {
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] = gg[c] + g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = acc(grads, req, values, *bias) {
                    for r in 0..rows {
                        for c in 0..n {
                            gb[c] = gb[c] + g[r * n + c];
                        }
                    }
                }
                if let Some(gx) = acc(grads, req, values, *x) {
                    let nf = F::of(n as f64);
                    let mut dxhat = vec![F::zero(); n];
                    for r in 0..rows {
                        let mut sum = F::zero();
                        let mut dot = F::zero();
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * gv[c];
                            sum = sum + dxhat[c];
                            dot = dot + dxhat[c] * xhat[r * n + c];
                        }
                        let k = rstd[r] / nf;
                        for c in 0..n {
                            gx[r * n + c] = gx[r * n + c] + k * (nf * dxhat[c] - sum - xhat[r * n + c] * dot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = acc(grads, req, values, *x) {
                    for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d = *d + s * m;
                    }
                }
            }
            Op::Gather { table, idx } => {
                let d = values[table.0].shape()[1];
                if let Some(gt) = acc(grads, req, values, *table) {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut gt[row * d..(row + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = values[logits.0].data();
                let k = g[0] / F::of(z.len() as f64);
                if let Some(gz) = acc(grads, req, values, *logits) {
                    for ((d, &z), &t) in gz.iter_mut().zip(z).zip(targets) {
                        *d = *d + k * (sigmoid(z) - t);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let k = g[0] / F::of(b as f64);
                if let Some(gz) = acc(grads, req, values, *logits) {
                    for r in 0..b {
                        for j in 0..c {
                            let y = if labels[r] == j { F::one() } else { F::zero() };
                            gz[r * c + j] = gz[r * c + j] + k * (probs[r * c + j] - y);
                        }
                    }
                }
            }
        }
    }
}


fn acc<'a, F: Scalar>(
    grads: &'a mut [Option<Vec<F>>],
    req: &[bool],
    values: &[Tensor<F>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !req[v.0] {
        return None;
    }
    let len = values[v.0].len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Row-major data of `src` (shape `shape`) with axes reordered so that
/// output axis `i` is input axis `axes[i]`.
fn permute_data<F: Scalar>(src: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = shape.len();
    if rank == 0 || axes.iter().enumerate().all(|(i, &a)| i == a) {
        return src.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    // copy contiguous runs when the last axis is kept in place
    let (run, dims) = if axes[rank - 1] == rank - 1 {
        (shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let mut index = vec![0usize; dims];
    let total = src.len() / run.max(1);
    for _ in 0..total {
        let base: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&src[base..base + run]);
        for d in (0..dims).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn permute_swaps_leading_axes() {
        let mut g = Graph::<f64>::new(false, 0);
        let x = g.input(t(&[2, 3, 1], &[0., 1., 2., 3., 4., 5.]));
        let y = g.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 1]);
        assert_eq!(g.value(y).data(), &[0., 3., 1., 4., 2., 5.]);
        let z = g.permute(x, &[2, 1, 0]).unwrap();
        assert_eq!(g.value(z).data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new(false, 0);
        let x = g.input(Tensor::from_fn(&[4, 7], |i| (i as f32 * 1.3).sin() * 5.0));
        for axis in [0, 1] {
            let y = g.softmax(x, axis).unwrap();
            let s = g.sum_all(y).unwrap();
            let expect = if axis == 1 { 4.0 } else { 7.0 };
            assert!((g.value(s).item() - expect).abs() < 1e-5);
            let m = g.mean(y, axis).unwrap();
            let len = g.shape(x)[axis] as f32;
            for &v in g.value(m).data() {
                assert!((v * len - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::<f64>::new(false, 0);
        let x = g.input(Tensor::from_fn(&[3, 16], |i| (i as f64 * 0.77).cos() * 3.0 + 2.0));
        let gain = g.input(Tensor::full(&[16], 1.0));
        let bias = g.input(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let mu = g.mean(y, 1).unwrap();
        let var = g.variance(y, 1).unwrap();
        for (&m, &v) in g.value(mu).data().iter().zip(g.value(var).data()) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut g = Graph::<f32>::new(false, 3);
        let x = g.input(Tensor::full(&[10], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::<f32>::new(true, 3);
        let x = g.input(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((400..600).contains(&zeros));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new(false, 0);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
    }

    #[test]
    fn loss_values_at_reference_points() {
        let mut g = Graph::<f64>::new(false, 0);
        let z = g.input(Tensor::zeros(&[5]));
        let l = g.bce_with_logits(z, &[1., 0., 1., 0., 1.]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let z = g.input(Tensor::zeros(&[4, 3]));
        let l = g.softmax_cross_entropy(z, &[0, 1, 2, 0]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }
}
