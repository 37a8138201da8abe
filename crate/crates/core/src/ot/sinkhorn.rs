use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    /// Entropic weight β.
    pub beta: f64,
    pub max_iter: usize,
    /// Stop once the L1 marginal violation drops below this.
    pub tol: f64,
    /// Newton steps on the dual potentials when the scaling iterations stop
    /// short of `tol`. Small β makes plain Sinkhorn converge slowly near the
    /// optimum, where Newton converges quadratically.
    pub newton_steps: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            beta: 0.05,
            max_iter: 200,
            tol: 1e-7,
            newton_steps: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    /// Unregularized cost of `plan`.
    pub objective: f64,
    /// `objective + β·Σ P log P`.
    pub regularized: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L1 distance of the plan's marginals from `(u, v)`.
    pub violation: f64,
}

impl TransportPlan {
    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(&self.plan, &self.u, &self.v)
    }
}

pub fn marginal_violation(plan: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let rows: f64 = plan
        .rows()
        .into_iter()
        .zip(u)
        .map(|(r, ui)| (r.sum() - ui).abs())
        .sum();
    let cols: f64 = plan
        .columns()
        .into_iter()
        .zip(v)
        .map(|(c, vj)| (c.sum() - vj).abs())
        .sum();
    rows + cols
}

pub fn entropy_term(plan: &Array2<f64>) -> f64 {
    plan.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum()
}

/// Checks that `w` is a strictly positive probability vector.
pub fn validate_marginal(name: &str, w: &Array1<f64>) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Contract(format!("marginal {name} is empty")));
    }
    if let Some(bad) = w.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Contract(format!(
            "marginal {name} must be strictly positive, found {bad}"
        )));
    }
    let s = w.sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "marginal {name} sums to {s}, not 1"
        )));
    }
    Ok(())
}

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn dual_value(cost: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>, beta: f64, f: &[f64], g: &[f64]) -> f64 {
    let mass: f64 = cost
        .indexed_iter()
        .map(|((i, j), c)| ((f[i] + g[j] - c) / beta).exp())
        .sum();
    u.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() + v.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
        - beta * mass
}

/// Damped Newton ascent on the entropic dual. The last column potential is
/// pinned, which removes the constant shift `(f + c, g − c)` and makes the
/// Hessian definite on a connected support.
fn newton_polish(
    cost: &Array2<f64>,
    u: &Array1<f64>,
    v: &Array1<f64>,
    beta: f64,
    f: &mut [f64],
    g: &mut [f64],
    opts: &SinkhornOptions,
) {
    let (n, m) = cost.dim();
    let k = n + m - 1;
    for _ in 0..opts.newton_steps {
        let plan = Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / beta).exp());
        if marginal_violation(&plan, u, v) < opts.tol {
            return;
        }
        let rows = plan.sum_axis(ndarray::Axis(1));
        let cols = plan.sum_axis(ndarray::Axis(0));
        let hess = nalgebra::DMatrix::from_fn(k, k, |a, b| match (a < n, b < n) {
            (true, true) => if a == b { rows[a] } else { 0.0 },
            (true, false) => plan[[a, b - n]],
            (false, true) => plan[[b, a - n]],
            (false, false) => if a == b { cols[a - n] } else { 0.0 },
        });
        let grad = nalgebra::DVector::from_fn(k, |a, _| if a < n { u[a] - rows[a] } else { v[a - n] - cols[a - n] });
        let Some(step) = hess.lu().solve(&grad) else {
            return;
        };
        let base = dual_value(cost, u, v, beta, f, g);
        let mut t = beta;
        let accepted = loop {
            let f2: Vec<f64> = (0..n).map(|i| f[i] + t * step[i]).collect();
            let g2: Vec<f64> = (0..m).map(|j| if j + 1 < m { g[j] + t * step[n + j] } else { g[j] }).collect();
            if dual_value(cost, u, v, beta, &f2, &g2) >= base {
                f.copy_from_slice(&f2);
                g.copy_from_slice(&g2);
                break true;
            }
            t *= 0.5;
            if t < beta * 1e-6 {
                break false;
            }
        };
        if !accepted {
            return;
        }
    }
}

/// Entropic optimal transport by log-domain Sinkhorn iterations on the kernel
/// `exp(−cost/β)`. The reported objective is the unregularized `⟨P, cost⟩`.
pub fn sinkhorn_wd(
    cost: &Array2<f64>,
    u: &Array1<f64>,
    v: &Array1<f64>,
    opts: &SinkhornOptions,
) -> Result<TransportPlan> {
    sinkhorn_traced(cost, u, v, opts, None)
}

/// Like [`sinkhorn_wd`], also recording the violation after every iteration.
pub fn sinkhorn_with_trace(
    cost: &Array2<f64>,
    u: &Array1<f64>,
    v: &Array1<f64>,
    opts: &SinkhornOptions,
) -> Result<(TransportPlan, Vec<f64>)> {
    let mut trace = Vec::new();
    let plan = sinkhorn_traced(cost, u, v, opts, Some(&mut trace))?;
    Ok((plan, trace))
}

fn sinkhorn_traced(
    cost: &Array2<f64>,
    u: &Array1<f64>,
    v: &Array1<f64>,
    opts: &SinkhornOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if u.len() != n || v.len() != m {
        return Err(Error::shape("sinkhorn_wd", &[n, m], &[u.len(), v.len()]));
    }
    validate_marginal("u", u)?;
    validate_marginal("v", v)?;
    if !(opts.beta > 0.0) {
        return Err(Error::Contract(format!("beta must be positive, got {}", opts.beta)));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Contract("cost matrix has non-finite entries".into()));
    }

    let beta = opts.beta;
    let log_u: Vec<f64> = u.iter().map(|x| x.ln()).collect();
    let log_v: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let plan_of = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / beta).exp())
    };

    let mut iterations = 0;
    let mut converged = false;
    let mut violation = f64::INFINITY;
    let mut plan = plan_of(&f, &g);
    for it in 1..=opts.max_iter.max(1) {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - cost[[i, j]]) / beta));
            f[i] = beta * (log_u[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[[i, j]]) / beta));
            g[j] = beta * (log_v[j] - lse);
        }
        plan = plan_of(&f, &g);
        violation = marginal_violation(&plan, u, v);
        iterations = it;
        if let Some(t) = trace.as_deref_mut() {
            t.push(violation);
        }
        if violation < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged && opts.newton_steps > 0 {
        newton_polish(cost, u, v, beta, &mut f, &mut g, opts);
        plan = plan_of(&f, &g);
        violation = marginal_violation(&plan, u, v);
        converged = violation < opts.tol;
    }

    let objective = (&plan * cost).sum();
    let regularized = objective + beta * entropy_term(&plan);
    Ok(TransportPlan {
        plan,
        u: u.clone(),
        v: v.clone(),
        objective,
        regularized,
        iterations,
        converged,
        violation,
    })
}
