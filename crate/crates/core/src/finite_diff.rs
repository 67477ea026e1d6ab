//! Central finite differences, used as an independent check on [`Graph::backward`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{usage_err, Result};
use crate::params::{Forward, Mode, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Default step for central differences.
pub const STEP: f64 = 1e-5;
/// Units of roundoff in one evaluation of the checked function, relative to its value.
pub const NOISE_ULPS: f64 = 64.0;

/// Outcome of comparing analytic and numeric gradients for one function.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error, `max(‖a − n‖∞ − noise, 0) / max(‖a‖∞, ‖n‖∞, 1e-8)`.
    pub max_rel_error: f64,
    /// Rounding floor of the central differences, `NOISE_ULPS · ε · max|f| / h`.
    pub noise: f64,
    /// Smallest ReLU input seen in the analytic pass. Central differences are only
    /// meaningful when this exceeds the step's effect on those inputs.
    pub relu_margin: Option<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

/// Relative error between two gradient tensors, normalized by the larger magnitude.
pub fn relative_error(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    let diff = a.data().iter().zip(n.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(n.max_abs()).max(1e-8);
    diff / scale
}

/// [`relative_error`] after discounting `noise` from the absolute difference.
pub fn relative_error_above(a: &Tensor<f64>, n: &Tensor<f64>, noise: f64) -> f64 {
    let diff = a.data().iter().zip(n.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(n.max_abs()).max(1e-8);
    (diff - noise).max(0.0) / scale
}

fn summarize(analytic: Vec<Tensor<f64>>, numeric: Vec<Tensor<f64>>, peak: f64, h: f64, relu_margin: Option<f64>) -> GradCheck {
    let noise = NOISE_ULPS * f64::EPSILON * peak / h;
    let max_rel_error = analytic.iter().zip(&numeric).map(|(a, n)| relative_error_above(a, n, noise)).fold(0.0, f64::max);
    GradCheck { max_rel_error, noise, relu_margin, analytic, numeric }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(usage_err("finite-difference target must be scalar"));
    }
    Ok(g.value(out).item())
}

/// Reduce `y` to a scalar through a fixed random weighting, so every output element
/// contributes a distinct coefficient to the checked gradient.
pub fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Compare `backward` against central differences with step `h` for every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let relu_margin = g.relu_margin();
    let mut peak = g.value(out).item().abs();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut est = vec![0.0; inputs[i].numel()];
        for (j, e) in est.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            peak = peak.max(plus.abs()).max(minus.abs());
            *e = (plus - minus) / (2.0 * h);
        }
        numeric.push(Tensor::new(inputs[i].shape(), est)?);
    }
    Ok(summarize(analytic, numeric, peak, h, relu_margin))
}

/// Like [`check`], but also differentiates every parameter of `store`. Parameters are
/// bound through a [`Forward`] session in `mode`, so modules that read the store
/// (normalization layers, predictors, residual blocks) are checked end to end.
/// Frozen flags are ignored: every parameter is treated as trainable. Parameters the
/// function never reads are skipped.
pub fn check_module<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], mode: Mode, f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut live = store.clone();
    live.set_frozen_by(|_| false);
    let run = |s: &ParamStore<f64>, xs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>, Vec<ParamId>, Option<f64>)> {
        let mut fwd = Forward::new(s, mode);
        let vars: Vec<Var> =
            xs.iter().map(|t| if grad { fwd.graph.param(t.clone()) } else { fwd.graph.constant(t.clone()) }).collect();
        let out = f(&mut fwd, &vars)?;
        if fwd.graph.value(out).numel() != 1 {
            return Err(usage_err("finite-difference target must be scalar"));
        }
        let value = fwd.graph.value(out).item();
        if !grad {
            return Ok((value, Vec::new(), Vec::new(), None));
        }
        let margin = fwd.graph.relu_margin();
        let grads = fwd.graph.backward(out)?;
        let mut analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let used: Vec<ParamId> = s.ids().filter(|&id| fwd.bound(id).is_some()).collect();
        for &id in &used {
            let v = fwd.bound(id).expect("bound");
            analytic.push(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(s.get(id).tensor.shape())));
        }
        Ok((value, analytic, used, margin))
    };
    let (value, analytic, used, relu_margin) = run(&live, inputs, true)?;
    let mut peak = value.abs();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        let mut est = vec![0.0; xs[i].numel()];
        for (j, e) in est.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let plus = run(&live, &xs, false)?.0;
            xs[i].data_mut()[j] = orig - h;
            let minus = run(&live, &xs, false)?.0;
            xs[i].data_mut()[j] = orig;
            peak = peak.max(plus.abs()).max(minus.abs());
            *e = (plus - minus) / (2.0 * h);
        }
        numeric.push(Tensor::new(xs[i].shape(), est)?);
    }
    for id in used {
        let n = live.get(id).tensor.numel();
        let mut est = vec![0.0; n];
        for (j, e) in est.iter_mut().enumerate() {
            let orig = live.get(id).tensor.data()[j];
            live.get_mut(id).tensor.data_mut()[j] = orig + h;
            let plus = run(&live, inputs, false)?.0;
            live.get_mut(id).tensor.data_mut()[j] = orig - h;
            let minus = run(&live, inputs, false)?.0;
            live.get_mut(id).tensor.data_mut()[j] = orig;
            peak = peak.max(plus.abs()).max(minus.abs());
            *e = (plus - minus) / (2.0 * h);
        }
        numeric.push(Tensor::new(live.get(id).tensor.shape(), est)?);
    }
    Ok(summarize(analytic, numeric, peak, h, relu_margin))
}
