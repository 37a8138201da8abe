use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::sinkhorn::{entropy_term, sinkhorn_wd, validate_marginal, SinkhornOptions, TransportPlan};
use crate::error::{Error, Result};
use crate::tensor::EdgeLoss;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GwOptions {
    pub sinkhorn: SinkhornOptions,
    pub outer_iter: usize,
    /// Stop once the largest plan entry change drops below this.
    pub tol: f64,
    pub loss: EdgeLoss,
}

impl Default for GwOptions {
    fn default() -> Self {
        GwOptions {
            sinkhorn: SinkhornOptions::default(),
            outer_iter: 20,
            tol: 1e-7,
            loss: EdgeLoss::Absolute,
        }
    }
}

fn check_square(name: &str, a: &Array2<f64>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::shape("gwd_cost", &[r, c], &[r, r]));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract(format!("adjacency {name} has non-finite entries")));
    }
    Ok(r)
}

/// Pseudo-cost `G[i,j] = Σ_{i',j'} P[i',j']·L(A_s[i,i'], A_t[j,j'])`.
///
/// The square loss separates as `a² + b² − 2ab` and is evaluated in
/// O(n²m + nm²) through the plan's marginals. The absolute loss does not
/// separate, so it is accumulated row by row in O(n²m²).
pub fn pseudo_cost(
    a_s: &Array2<f64>,
    a_t: &Array2<f64>,
    plan: &Array2<f64>,
    loss: EdgeLoss,
) -> Array2<f64> {
    let (n, m) = plan.dim();
    match loss {
        EdgeLoss::Square => {
            let p_rows: Array1<f64> = plan.sum_axis(ndarray::Axis(1));
            let p_cols: Array1<f64> = plan.sum_axis(ndarray::Axis(0));
            let s_sq = a_s.mapv(|x| x * x).dot(&p_rows);
            let t_sq = a_t.mapv(|x| x * x).dot(&p_cols);
            let cross = a_s.dot(plan).dot(&a_t.t());
            Array2::from_shape_fn((n, m), |(i, j)| s_sq[i] + t_sq[j] - 2.0 * cross[[i, j]])
        }
        EdgeLoss::Absolute => {
            let mut g = Array2::zeros((n, m));
            for i in 0..n {
                let arow = a_s.row(i);
                for j in 0..m {
                    let trow = a_t.row(j);
                    let mut acc = 0.0;
                    for (i2, &a) in arow.iter().enumerate() {
                        let prow = plan.row(i2);
                        for (&p, &b) in prow.iter().zip(trow.iter()) {
                            acc += p * (a - b).abs();
                        }
                    }
                    g[[i, j]] = acc;
                }
            }
            g
        }
    }
}

/// GW objective `Σ P_ij P_i'j' L` at a fixed plan, with its pseudo-cost.
pub fn gwd_cost(
    a_s: &Array2<f64>,
    a_t: &Array2<f64>,
    plan: &Array2<f64>,
    loss: EdgeLoss,
) -> Result<(f64, Array2<f64>)> {
    let n = check_square("A_s", a_s)?;
    let m = check_square("A_t", a_t)?;
    if plan.dim() != (n, m) {
        return Err(Error::shape("gwd_cost", &[n, m], &[plan.nrows(), plan.ncols()]));
    }
    let g = pseudo_cost(a_s, a_t, plan, loss);
    Ok(((plan * &g).sum(), g))
}

/// Entropic Gromov-Wasserstein by projected (mirror) descent: starting from
/// `u·vᵀ`, each outer step re-solves an entropic transport problem on the
/// pseudo-cost of the current plan.
pub fn entropic_gwd(
    a_s: &Array2<f64>,
    a_t: &Array2<f64>,
    u: &Array1<f64>,
    v: &Array1<f64>,
    opts: &GwOptions,
) -> Result<TransportPlan> {
    let n = check_square("A_s", a_s)?;
    let m = check_square("A_t", a_t)?;
    if u.len() != n || v.len() != m {
        return Err(Error::shape("entropic_gwd", &[n, m], &[u.len(), v.len()]));
    }
    validate_marginal("u", u)?;
    validate_marginal("v", v)?;

    let mut plan = Array2::from_shape_fn((n, m), |(i, j)| u[i] * v[j]);
    let mut converged = false;
    let mut iterations = 0;
    let mut violation = 0.0;
    for it in 1..=opts.outer_iter.max(1) {
        let g = pseudo_cost(a_s, a_t, &plan, opts.loss);
        let next = sinkhorn_wd(&g, u, v, &opts.sinkhorn)?;
        let delta = next
            .plan
            .iter()
            .zip(plan.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        plan = next.plan;
        violation = next.violation;
        iterations = it;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }

    let (objective, _) = gwd_cost(a_s, a_t, &plan, opts.loss)?;
    Ok(TransportPlan {
        regularized: objective + opts.sinkhorn.beta * entropy_term(&plan),
        plan,
        u: u.clone(),
        v: v.clone(),
        objective,
        iterations,
        converged,
        violation,
    })
}
