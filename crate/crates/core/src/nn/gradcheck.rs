//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ModelParams;
use super::tape::{Mode, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Collapses any output to a scalar through fixed random weights, so every
/// output element contributes a distinct direction.
pub fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let [r, c] = t.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = t.constant(w);
    let m = t.mul(out, w)?;
    Ok(t.sum(m))
}

fn evaluate(
    f: &impl Fn(&mut Tape, &ModelParams, &[Var]) -> Result<Var>,
    params: &ModelParams,
    inputs: &[Tensor],
) -> Result<f64> {
    let mut t = Tape::new(Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let out = f(&mut t, params, &vars)?;
    let v = t.value(out);
    if v.shape() != [1, 1] {
        return Err(Error::Shape {
            op: "gradient_check (output must be 1x1)",
            lhs: v.shape().to_vec(),
            rhs: vec![1, 1],
        });
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient_check forward".into()));
    }
    Ok(v)
}

/// Tape gradients with respect to every parameter, then every input.
pub fn analytic_gradients(
    f: &impl Fn(&mut Tape, &ModelParams, &[Var]) -> Result<Var>,
    params: &ModelParams,
    inputs: &[Tensor],
) -> Result<Vec<Tensor>> {
    let mut t = Tape::new(Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let out = f(&mut t, params, &vars)?;
    let grads = t.backward(out)?;
    let mut scratch = params.clone();
    scratch.zero_grad();
    grads.accumulate(&t, &mut scratch);
    let mut result: Vec<Tensor> = scratch.iter().map(|p| p.grad.clone()).collect();
    for (v, x) in vars.iter().zip(inputs) {
        result.push(
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols())),
        );
    }
    if result.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient_check backward".into()));
    }
    Ok(result)
}

/// `(f(x+ε) - f(x-ε)) / 2ε` for every parameter scalar, then every input scalar.
pub fn numeric_gradients(
    f: &impl Fn(&mut Tape, &ModelParams, &[Var]) -> Result<Var>,
    params: &ModelParams,
    inputs: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>> {
    let mut result = Vec::new();
    let mut p = params.clone();
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        let shape = p.value(id).shape();
        let mut g = Tensor::zeros(shape[0], shape[1]);
        for i in 0..g.len() {
            let orig = p.value(id).data()[i];
            p.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = evaluate(f, &p, inputs)?;
            p.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = evaluate(f, &p, inputs)?;
            p.get_mut(id).value.data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        result.push(g);
    }
    let mut xs = inputs.to_vec();
    for j in 0..xs.len() {
        let mut g = Tensor::zeros(xs[j].rows(), xs[j].cols());
        for i in 0..g.len() {
            let orig = xs[j].data()[i];
            xs[j].data_mut()[i] = orig + eps;
            let plus = evaluate(f, params, &xs)?;
            xs[j].data_mut()[i] = orig - eps;
            let minus = evaluate(f, params, &xs)?;
            xs[j].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        result.push(g);
    }
    Ok(result)
}

/// Max relative error between tape and central-difference gradients over
/// all parameters and inputs.
pub fn gradient_check(
    f: impl Fn(&mut Tape, &ModelParams, &[Var]) -> Result<Var>,
    params: &ModelParams,
    inputs: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(&f, params, inputs)?;
    let numeric = numeric_gradients(&f, params, inputs, eps)?;
    Ok(GradCheckReport {
        max_rel_error: max_relative_error(&analytic, &numeric),
        checked: analytic.iter().map(Tensor::len).sum(),
    })
}
