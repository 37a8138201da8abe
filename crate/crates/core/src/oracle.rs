//! Self-checking property suites behind the `oracle` command.
//!
//! Each suite compares a solver or a gradient against an independent
//! reference (brute-force enumeration or central differences) on seeded
//! random instances and reports the worst deviation it saw.

use std::fmt;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{encode_on, EmbeddingReduce, EncoderParams, EncoderVars};
use crate::error::Result;
use crate::exec::Exec;
use crate::flow::{batch_log_likelihood_on, FlowLayerVars, FlowModel, FlowVars};
use crate::gradcheck::{self, relative_error};
use crate::graph::{build_graph_on, AttentionParams, AttentionVars, KeyIndex};
use crate::ot::exact::{exact_uniform_gw, exact_uniform_ot, permutations};
use crate::ot::{
    cost_matrix, entropic_gwd, sinkhorn_wd, equivalence_check, to_tensor, uniform, GwOptions,
    SinkhornOptions,
};
use crate::tensor::{EdgeLoss, Tape, Tensor};

pub const WD_BETA: f64 = 0.005;
pub const WD_REL_GAP: f64 = 0.02;
pub const MARGINAL_TOL: f64 = 1e-6;
pub const GW_BETA: f64 = 0.01;
pub const GW_ISO_TOL: f64 = 1e-3;
pub const PATH_STAR_MIN: f64 = 0.05;
pub const GRAD_TOL: f64 = 1e-4;
pub const ENVELOPE_TOL: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Compares the inner-product maximizers without transposing them, which
    /// breaks the Frobenius/inner-product equivalence check.
    Untransposed,
}

#[derive(Clone, Copy, Debug)]
pub struct OracleOptions {
    /// Instance count of the equivalence suite. The solver suites scale with it.
    pub seeds: usize,
    pub fault: Fault,
    pub exec: Exec,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            seeds: 100,
            fault: Fault::None,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub detail: String,
    #[serde(with = "secs")]
    pub elapsed: Duration,
}

mod secs {
    use std::time::Duration;

    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }
}

impl SuiteReport {
    /// Case counts, worst deviation, timing and detail, without the status.
    pub fn summary(&self) -> String {
        let mut text = format!(
            "{}/{} cases, max deviation {:.3e} (tol {:.0e}), {:.2}s",
            self.cases - self.failures,
            self.cases,
            self.max_deviation,
            self.tolerance,
            self.elapsed.as_secs_f64()
        );
        if !self.detail.is_empty() {
            text.push_str("; ");
            text.push_str(&self.detail);
        }
        text
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<18} {}", self.name, self.summary())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub suites: Vec<SuiteReport>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
}

fn conjugate(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.dim(), |(i, j)| a[[perm[i], perm[j]]])
}

/// Collects per-case `(deviation, ok)` pairs into a report.
fn finish(
    name: &'static str,
    tolerance: f64,
    start: Instant,
    cases: Vec<Result<(f64, bool)>>,
    detail: String,
) -> SuiteReport {
    let mut failures = 0;
    let mut max_deviation: f64 = 0.0;
    let mut errors = Vec::new();
    for c in &cases {
        match c {
            Ok((dev, ok)) => {
                max_deviation = max_deviation.max(*dev);
                if !ok {
                    failures += 1;
                }
            }
            Err(e) => {
                failures += 1;
                errors.push(e.to_string());
            }
        }
    }
    let mut detail = detail;
    if let Some(e) = errors.first() {
        if !detail.is_empty() {
            detail.push_str("; ");
        }
        detail.push_str(&format!("{} errors, first: {e}", errors.len()));
    }
    SuiteReport {
        name,
        passed: failures == 0 && !cases.is_empty(),
        cases: cases.len(),
        failures,
        max_deviation,
        tolerance,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Frobenius-distance minimizers equal inner-product maximizers on random
/// instances with `n ∈ {3, 4}` and entries uniform in `[0, 1]`. The deviation
/// is the residual of `min‖Y−PZ‖² = ‖Y‖² + ‖Z‖² − 2·max⟨P, YZᵀ⟩`.
pub fn equivalence_suite(count: usize, fault: Fault, exec: Exec) -> SuiteReport {
    let start = Instant::now();
    let cases = exec.map_range(count, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let n = 3 + k % 2;
        let d = 2;
        let a_s = uniform_matrix(&mut rng, n, n);
        let x_s = uniform_matrix(&mut rng, n, d);
        let a_t = uniform_matrix(&mut rng, n, n);
        let x_t = uniform_matrix(&mut rng, n, d);
        let out = equivalence_check(&a_s, &x_s, &a_t, &x_t)?;
        let y = a_s.dot(&x_s);
        let z = a_t.dot(&x_t);
        let norms = y.iter().chain(z.iter()).map(|v| v * v).sum::<f64>();
        let residual = (out.min_frobenius - (norms - 2.0 * out.max_inner)).abs();
        let holds = match fault {
            Fault::None => out.holds,
            Fault::Untransposed => out.frobenius_argmin == out.inner_argmax,
        };
        Ok((residual, holds && residual <= 1e-9 * norms.max(1.0)))
    });
    let instances = if count == 1 { "instance" } else { "instances" };
    finish("equivalence", 1e-9, start, cases, format!("{count} {instances}, n = 3 and 4"))
}

/// Entropic transport at small β against the exact optimum found by
/// enumerating the permutation vertices of 4×4 uniform problems.
pub fn sinkhorn_suite(count: usize, exec: Exec) -> SuiteReport {
    let start = Instant::now();
    let opts = SinkhornOptions {
        beta: WD_BETA,
        max_iter: 2000,
        tol: 1e-9,
        newton_steps: 50,
    };
    let raw = exec.map_range(count, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let x = uniform_matrix(&mut rng, 4, 3);
        let y = uniform_matrix(&mut rng, 4, 3);
        let cost = cost_matrix(&x, &y)?;
        let (exact, _) = exact_uniform_ot(&cost)?;
        let u = uniform(4);
        let plan = sinkhorn_wd(&cost, &u, &u, &opts)?;
        Ok(((plan.objective - exact) / exact.max(1e-12), plan.marginal_violation()))
    });
    let violation = raw.iter().flatten().map(|r| r.1).fold(0.0, f64::max);
    let cases = raw
        .into_iter()
        .map(|r| r.map(|(gap, v)| (gap, (-1e-9..=WD_REL_GAP).contains(&gap) && v < MARGINAL_TOL)))
        .collect();
    finish(
        "sinkhorn_vs_exact",
        WD_REL_GAP,
        start,
        cases,
        format!("β = {WD_BETA}, worst marginal violation {violation:.1e}"),
    )
}

/// Path and star graphs on four nodes, as symmetric 0/1 adjacencies.
pub fn path_and_star() -> (Array2<f64>, Array2<f64>) {
    let mut path = Array2::zeros((4, 4));
    let mut star = Array2::zeros((4, 4));
    for i in 0..3 {
        path[[i, i + 1]] = 1.0;
        path[[i + 1, i]] = 1.0;
        star[[0, i + 1]] = 1.0;
        star[[i + 1, 0]] = 1.0;
    }
    (path, star)
}

fn gw_options() -> GwOptions {
    GwOptions {
        sinkhorn: SinkhornOptions {
            beta: GW_BETA,
            max_iter: 2000,
            tol: 1e-9,
            newton_steps: 50,
        },
        outer_iter: 50,
        tol: 1e-9,
        loss: EdgeLoss::Absolute,
    }
}

/// Entropic GW between a random graph and a relabeled copy of itself, plus
/// the path/star separation checked against its enumerated value.
pub fn gw_suite(count: usize, exec: Exec) -> SuiteReport {
    let start = Instant::now();
    let opts = gw_options();
    let mut cases = exec.map_range(count, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + k as u64);
        let n = 2 + k % 4;
        let a = uniform_matrix(&mut rng, n, n);
        let mut perm = permutations(n);
        let p = perm.swap_remove(rng.random_range(0..perm.len()));
        let b = conjugate(&a, &p);
        let u = uniform(n);
        let plan = entropic_gwd(&a, &b, &u, &u, &opts)?;
        Ok((plan.objective, plan.objective < GW_ISO_TOL))
    });

    let (path, star) = path_and_star();
    let u = uniform(4);
    let separation = exact_uniform_gw(&path, &star, EdgeLoss::Absolute).and_then(|(exact, _)| {
        let plan = entropic_gwd(&path, &star, &u, &u, &opts)?;
        Ok((exact, plan.objective))
    });
    let detail = match &separation {
        Ok((exact, entropic)) => {
            format!("path/star: entropic {entropic:.4}, best permutation {exact:.4}, floor {PATH_STAR_MIN}")
        }
        Err(e) => format!("path/star: {e}"),
    };
    let mut report = finish("gw_isomorphism", GW_ISO_TOL, start, std::mem::take(&mut cases), detail);
    match separation {
        Ok((_, entropic)) if entropic > PATH_STAR_MIN => {}
        _ => {
            report.passed = false;
            report.failures += 1;
        }
    }
    report.cases += 1;
    report
}

fn flow_vars(v: &[crate::tensor::Var]) -> FlowVars {
    let layers = v
        .chunks(9)
        .map(|p| FlowLayerVars {
            w_in: p[0],
            w_cond: p[1],
            b_hidden: p[2],
            w_scale: p[3],
            c_scale: p[4],
            b_scale: p[5],
            w_shift: p[6],
            c_shift: p[7],
            b_shift: p[8],
        })
        .collect();
    FlowVars { layers }
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Relative error of the plan-frozen gradient of `λ·(WD + GWD)` with respect
/// to both embedding matrices, against central differences of the distance
/// re-solved at every perturbed point.
///
/// The re-solved quantity is the entropic objective the solver minimizes,
/// `⟨P, C⟩ + β·Σ P log P`, whose derivative is exactly `⟨P*, ∂C⟩`. The bare
/// `⟨P*, C⟩` also moves through `P*` and differs by a term that vanishes
/// only as β → 0.
pub fn envelope_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, lambda) = (4, 3, 0.7);
    let x_s = uniform_matrix(&mut rng, n, d);
    let x_t = uniform_matrix(&mut rng, n, d);
    let a_s = uniform_matrix(&mut rng, n, n);
    let a_t = uniform_matrix(&mut rng, n, n);
    let opts = SinkhornOptions {
        beta: 0.05,
        max_iter: 5000,
        tol: 1e-12,
        newton_steps: 50,
    };
    let gw = GwOptions {
        sinkhorn: opts,
        ..gw_options()
    };
    let u = uniform(n);
    let edge = entropic_gwd(&a_s, &a_t, &u, &u, &gw)?;
    let solve = |xs: &Array2<f64>, xt: &Array2<f64>| -> Result<(f64, Array2<f64>)> {
        let plan = sinkhorn_wd(&cost_matrix(xs, xt)?, &u, &u, &opts)?;
        Ok((lambda * (plan.regularized + edge.objective), plan.plan))
    };

    let (_, plan) = solve(&x_s, &x_t)?;
    let mut tape = Tape::new();
    let vs = tape.leaf(to_tensor(&x_s));
    let vt = tape.leaf(to_tensor(&x_t));
    let wd = tape.transport(vs, vt, &to_tensor(&plan))?;
    let loss = tape.scale(wd, lambda);
    let grads = tape.backward(loss)?;

    let eps = gradcheck::FD_EPS;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (which, var) in [(0usize, vs), (1, vt)] {
        analytic.extend_from_slice(grads.get_or_zero(var).data());
        let base = [x_s.clone(), x_t.clone()];
        for idx in 0..n * d {
            let (r, c) = (idx / d, idx % d);
            let mut hi = base.clone();
            hi[which][[r, c]] += eps;
            let mut lo = base.clone();
            lo[which][[r, c]] -= eps;
            let f_hi = solve(&hi[0], &hi[1])?.0;
            let f_lo = solve(&lo[0], &lo[1])?.0;
            numeric.push((f_hi - f_lo) / (2.0 * eps));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Finite-difference checks of attention, encoder, flow and the alignment
/// distance. Each case is one randomly initialized component.
pub fn gradient_suite(exec: Exec) -> SuiteReport {
    let start = Instant::now();
    let kinds = ["attention", "encoder", "flow", "envelope"];
    let per_kind = exec.map(&kinds, |&kind| -> Result<(f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3000);
        match kind {
            "attention" => {
                let params = AttentionParams::init(5, &mut rng);
                let window = random_tensor(&mut rng, 5, 3, 1.0);
                let weights = random_tensor(&mut rng, 3, 3, 1.0);
                let r = gradcheck::check(&[params.w_q, params.w_k, window], |tape, v| {
                    let vars = AttentionVars { w_q: v[0], w_k: v[1] };
                    let g = build_graph_on::<ChaCha8Rng>(tape, v[2], &vars, KeyIndex::J, None)?;
                    let c = tape.constant(weights.clone());
                    let prod = tape.mul(g.adjacency, c)?;
                    Ok(tape.sum(prod))
                })?;
                Ok((r.max_rel_err, r.max_rel_err <= GRAD_TOL))
            }
            "encoder" => {
                let p = EncoderParams::init(3, 2, &mut rng);
                let mut inputs: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
                inputs[2] = random_tensor(&mut rng, 1, 12, 0.3);
                inputs.push(random_tensor(&mut rng, 3, 4, 1.0));
                let raw = random_tensor(&mut rng, 3, 3, 1.0).map(f64::abs);
                let row_sum = |i: usize| (0..3).map(|j| raw.at(i, j)).sum::<f64>();
                inputs.push(Tensor::from_fn(3, 3, |i, j| raw.at(i, j) / row_sum(i)));
                let weights = random_tensor(&mut rng, 3, 8, 1.0);
                let r = gradcheck::check(&inputs, |tape, v| {
                    let vars = EncoderVars {
                        w_ih: v[0],
                        w_hh: v[1],
                        bias: v[2],
                        w1: v[3],
                        w2: v[4],
                        w3: v[5],
                    };
                    let e = encode_on(tape, v[6], v[7], &vars, EmbeddingReduce::Concat)?;
                    let c = tape.constant(weights.clone());
                    let prod = tape.mul(e, c)?;
                    Ok(tape.sum(prod))
                })?;
                Ok((r.max_rel_err, r.max_rel_err <= GRAD_TOL))
            }
            "flow" => {
                let mut model = FlowModel::new(3, 2, 5, 2, &mut rng)?;
                for (_, t) in model.named_mut() {
                    for x in t.data_mut() {
                        *x = rng.random_range(-0.5..0.5);
                    }
                }
                let mut inputs: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
                let np = inputs.len();
                inputs.push(random_tensor(&mut rng, 4, 3, 1.0));
                inputs.push(random_tensor(&mut rng, 4, 2, 1.0));
                let r = gradcheck::check(&inputs, |tape, v| {
                    batch_log_likelihood_on(tape, &model, &flow_vars(&v[..np]), v[np], v[np + 1])
                })?;
                Ok((r.max_rel_err, r.max_rel_err <= GRAD_TOL))
            }
            _ => {
                let err = (0..5).map(envelope_gradient_error).try_fold(0.0f64, |m, e| Ok::<_, crate::Error>(m.max(e?)))?;
                Ok((err, err <= ENVELOPE_TOL))
            }
        }
    });
    let detail = kinds
        .iter()
        .zip(&per_kind)
        .map(|(k, r)| match r {
            Ok((e, _)) => format!("{k} {e:.1e}"),
            Err(_) => format!("{k} error"),
        })
        .collect::<Vec<_>>()
        .join(", ");
    let mut report = finish("gradients", GRAD_TOL, start, per_kind, detail);
    report.detail.push_str(&format!(" (envelope tol {ENVELOPE_TOL:.0e})"));
    report
}

pub fn run_oracle(opts: &OracleOptions) -> OracleReport {
    let n = opts.seeds.max(1);
    OracleReport {
        suites: vec![
            equivalence_suite(n, opts.fault, opts.exec),
            sinkhorn_suite((n / 2).max(1), opts.exec),
            gw_suite((n / 5).max(1), opts.exec),
            gradient_suite(opts.exec),
        ],
    }
}
