//! Central finite-difference gradient checking against the tape.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst norm-wise relative error over all inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Numeric gradient of a scalar function of several tensors.
pub fn numeric_grad<F>(inputs: &[Tensor], which: usize, eps: f64, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let orig = work[which].data()[k];
        work[which].data_mut()[k] = orig + eps;
        let hi = f(&work)?;
        work[which].data_mut()[k] = orig - eps;
        let lo = f(&work)?;
        work[which].data_mut()[k] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares tape gradients of `build` with central differences for every
/// input tensor.
pub fn check<F>(inputs: &[Tensor], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*v);
        let numeric = numeric_grad(inputs, i, FD_EPS, &eval)?;
        per_input.push(relative_error(analytic.data(), &numeric));
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_err,
        per_input,
    })
}
