//! Central finite-difference verification of tape gradients.

use super::{Graph, Result, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over parameter tensors of ‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)
    pub max_rel_error: f64,
    /// parameter tensor attaining `max_rel_error`
    pub worst_param: usize,
    /// max over entries of |a − n| / max(|a|, |n|, 1e-8); dominated by
    /// difference noise (~1e-10 absolute) on entries below ~1e-6
    pub max_entry_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn eval<F>(params: &[Tensor], f: &F, trainable: bool) -> Result<(Graph, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if trainable { g.param(p) } else { g.constant(p.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::Contract(format!("objective must be scalar, got {:?}", v.shape())));
    }
    if !v.data()[0].is_finite() {
        return Err(TensorError::NonFinite(format!("objective evaluated to {}", v.data()[0])));
    }
    Ok((g, out))
}

/// Objective value and tape gradients.
pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, out) = eval(params, f, true)?;
    let value = g.value(out).data()[0];
    g.backward(out)?;
    Ok((value, g.param_grads()))
}

/// Central differences with step [`FD_STEP`] on every parameter entry.
pub fn numeric_gradients<F>(params: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut gp = Tensor::zeros(params[pi].shape());
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + FD_STEP;
            let (g, o) = eval(&work, f, false)?;
            let plus = g.value(o).data()[0];
            work[pi].data_mut()[j] = orig - FD_STEP;
            let (g, o) = eval(&work, f, false)?;
            let minus = g.value(o).data()[0];
            work[pi].data_mut()[j] = orig;
            gp.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        grads.push(gp);
    }
    Ok(grads)
}

/// Worst per-tensor relative error (Euclidean norms) and its tensor.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor]) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut a.data().iter().zip(n.data()).map(|(x, y)| x - y));
        let scale = norm(&mut a.data().iter().copied()).max(norm(&mut n.data().iter().copied()));
        let e = diff / scale.max(REL_FLOOR);
        if e > worst.0 || e.is_nan() {
            worst = (e, pi);
        }
    }
    worst
}

/// Worst elementwise relative error and where it occurred.
pub fn compare_entries(analytic: &[Tensor], numeric: &[Tensor]) -> (f64, (usize, usize)) {
    let mut worst = (0.0, (0, 0));
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (x, y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR);
            if e > worst.0 || e.is_nan() {
                worst = (e, (pi, j));
            }
        }
    }
    worst
}

pub fn grad_check<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, &f)?;
    let (max_rel_error, worst_param) = compare_gradients(&analytic, &numeric);
    let (max_entry_rel_error, worst) = compare_entries(&analytic, &numeric);
    Ok(GradCheckReport { max_rel_error, worst_param, max_entry_rel_error, worst, analytic, numeric })
}
