//! Central finite-difference gradient checks at binary64.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Largest coordinate-wise `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(NnError::Invalid(format!(
            "grad_check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Analytic gradients of `f` with respect to each input.
pub fn analytic_gradients<Fun>(f: &Fun, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(false, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

/// Central differences of `f` with respect to each input.
pub fn numeric_gradients<Fun>(f: &Fun, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(false, 0);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut work = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[which].len()];
        for (k, slot) in grad.iter_mut().enumerate() {
            let orig = work[which].data()[k];
            work[which].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        result.push(grad);
    }
    Ok(result)
}

/// Max relative error between analytic and central-difference gradients of
/// a scalar function of several inputs.
pub fn grad_check_many<Fun>(f: Fun, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(&f, inputs)?;
    let n = numeric_gradients(&f, inputs, eps)?;
    Ok(a.iter()
        .zip(&n)
        .map(|(a, n)| max_relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<Fun>(f: Fun, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(input), eps)
}

/// Checks parameter gradients of `f`, which builds a scalar loss from the
/// parameters bound out of `store`. `stride` > 1 checks every `stride`-th
/// coordinate of each parameter only.
pub fn grad_check_params<Fun>(f: Fun, store: &ParamStore<f64>, eps: f64, stride: usize) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new(false, 0);
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let grads = g.param_grads();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(false, 0);
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let Some(analytic) = grads.get(&name) else { continue };
        let len = analytic.len();
        let mut a = Vec::new();
        let mut n = Vec::new();
        for k in (0..len).step_by(stride.max(1)) {
            let orig = work.get(&name).unwrap().data()[k];
            work.get_mut(&name).unwrap().data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = orig;
            a.push(analytic.data()[k]);
            n.push((plus - minus) / (2.0 * eps));
        }
        worst = worst.max(max_relative_error(&a, &n));
    }
    Ok(worst)
}

/// Fixed pseudo-random weights for reducing a tensor output to a scalar.
pub fn probe_weights(len: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// `Σ wᵢ·xᵢ` with [`probe_weights`], turning any output into a scalar loss.
pub fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = Tensor::new(shape, probe_weights(g.value(x).len(), seed))?;
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    g.sum_all(y)
}
