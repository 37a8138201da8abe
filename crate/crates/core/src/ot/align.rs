use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::gw::{entropic_gwd, GwOptions};
use super::sinkhorn::{sinkhorn_wd, uniform, SinkhornOptions, TransportPlan};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::EdgeLoss;

/// Which alignment terms enter `D_GA`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoWd,
    NoGwd,
    NoGa,
}

impl Ablation {
    pub fn use_wd(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoGwd)
    }

    pub fn use_gwd(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoWd)
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_wd" => Ok(Ablation::NoWd),
            "no_gwd" => Ok(Ablation::NoGwd),
            "no_ga" => Ok(Ablation::NoGa),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}` (expected full, no_wd, no_gwd or no_ga)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoWd => "no_wd",
            Ablation::NoGwd => "no_gwd",
            Ablation::NoGa => "no_ga",
        })
    }
}

/// How the reference graph Ω is built from the other windows of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// Element-wise mean of the other windows' embeddings and adjacencies.
    #[default]
    Mean,
    /// All other windows' nodes stacked into one (B−1)·N-node graph with a
    /// block-diagonal adjacency.
    Concat,
}

impl FromStr for OmegaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(OmegaMode::Mean),
            "concat" => Ok(OmegaMode::Concat),
            _ => Err(Error::Config(format!("unknown omega mode `{s}` (mean or concat)"))),
        }
    }
}

impl fmt::Display for OmegaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OmegaMode::Mean => "mean",
            OmegaMode::Concat => "concat",
        })
    }
}

/// Euclidean ground cost `c(x_i, y_j) = ‖x_i − y_j‖₂`.
pub fn cost_matrix(x_s: &Array2<f64>, x_t: &Array2<f64>) -> Result<Array2<f64>> {
    if x_s.ncols() != x_t.ncols() {
        return Err(Error::Contract(format!(
            "embedding dimensions differ: {} vs {}",
            x_s.ncols(),
            x_t.ncols()
        )));
    }
    Ok(Array2::from_shape_fn((x_s.nrows(), x_t.nrows()), |(i, j)| {
        x_s.row(i)
            .iter()
            .zip(x_t.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

#[derive(Clone, Debug)]
pub struct AlignProblem {
    pub x_s: Array2<f64>,
    pub a_s: Array2<f64>,
    pub x_t: Array2<f64>,
    pub a_t: Array2<f64>,
    /// Fusion weight λ.
    pub lambda: f64,
    /// Entropic weight β.
    pub beta: f64,
}

/// Solver budgets shared by every alignment in a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSettings {
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_newton_steps: usize,
    pub gw_outer_iter: usize,
    pub gw_tol: f64,
    pub edge_loss: EdgeLoss,
    pub ablation: Ablation,
}

impl Default for AlignSettings {
    fn default() -> Self {
        AlignSettings {
            sinkhorn_max_iter: 200,
            sinkhorn_tol: 1e-7,
            sinkhorn_newton_steps: 0,
            gw_outer_iter: 20,
            gw_tol: 1e-7,
            edge_loss: EdgeLoss::Absolute,
            ablation: Ablation::Full,
        }
    }
}

impl AlignSettings {
    pub fn sinkhorn(&self, beta: f64) -> SinkhornOptions {
        SinkhornOptions {
            beta,
            max_iter: self.sinkhorn_max_iter,
            tol: self.sinkhorn_tol,
            newton_steps: self.sinkhorn_newton_steps,
        }
    }

    pub fn gw(&self, beta: f64) -> GwOptions {
        GwOptions {
            sinkhorn: self.sinkhorn(beta),
            outer_iter: self.gw_outer_iter,
            tol: self.gw_tol,
            loss: self.edge_loss,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaResult {
    /// `λ·(WD + GWD)` over the enabled terms.
    pub d_ga: f64,
    pub lambda: f64,
    /// Node plan P.
    pub wd: Option<TransportPlan>,
    /// Edge plan P̂.
    pub gwd: Option<TransportPlan>,
}

impl GaResult {
    pub fn wd_objective(&self) -> f64 {
        self.wd.as_ref().map_or(0.0, |p| p.objective)
    }

    pub fn gwd_objective(&self) -> f64 {
        self.gwd.as_ref().map_or(0.0, |p| p.objective)
    }

    /// `WD + GWD` without the λ weight.
    pub fn raw(&self) -> f64 {
        self.wd_objective() + self.gwd_objective()
    }
}

/// Fused alignment distance with independent node and edge plans.
pub fn ga_distance(problem: &AlignProblem, settings: &AlignSettings) -> Result<GaResult> {
    if !(problem.lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be ≥ 0, got {}", problem.lambda)));
    }
    let (n, m) = (problem.x_s.nrows(), problem.x_t.nrows());
    if problem.a_s.dim() != (n, n) || problem.a_t.dim() != (m, m) {
        return Err(Error::Contract(
            "adjacency sizes must match the embedding node counts".into(),
        ));
    }
    let (u, v) = (uniform(n), uniform(m));
    let wd = if settings.ablation.use_wd() {
        let cost = cost_matrix(&problem.x_s, &problem.x_t)?;
        Some(sinkhorn_wd(&cost, &u, &v, &settings.sinkhorn(problem.beta))?)
    } else {
        None
    };
    let gwd = if settings.ablation.use_gwd() {
        Some(entropic_gwd(&problem.a_s, &problem.a_t, &u, &v, &settings.gw(problem.beta))?)
    } else {
        None
    };
    let raw = wd.as_ref().map_or(0.0, |p| p.objective) + gwd.as_ref().map_or(0.0, |p| p.objective);
    Ok(GaResult {
        d_ga: problem.lambda * raw,
        lambda: problem.lambda,
        wd,
        gwd,
    })
}

/// Plain-valued graph of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphValues {
    /// `N × d`
    pub embeddings: Array2<f64>,
    /// `N × N`, row-stochastic.
    pub adjacency: Array2<f64>,
}

/// The reference graph Ω for window `i`.
pub fn omega_reference(graphs: &[GraphValues], i: usize, mode: OmegaMode) -> Result<GraphValues> {
    let b = graphs.len();
    if b < 2 {
        return Err(Error::Contract(format!(
            "batch alignment needs at least 2 windows, got {b}"
        )));
    }
    let others = graphs.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, g)| g);
    match mode {
        OmegaMode::Mean => {
            let mut emb = Array2::zeros(graphs[0].embeddings.dim());
            let mut adj = Array2::zeros(graphs[0].adjacency.dim());
            for g in others {
                emb += &g.embeddings;
                adj += &g.adjacency;
            }
            let k = (b - 1) as f64;
            Ok(GraphValues {
                embeddings: emb / k,
                adjacency: adj / k,
            })
        }
        OmegaMode::Concat => {
            let others: Vec<&GraphValues> = others.collect();
            let n = graphs[0].adjacency.nrows();
            let d = graphs[0].embeddings.ncols();
            let total = n * others.len();
            let mut emb = Array2::zeros((total, d));
            let mut adj = Array2::zeros((total, total));
            for (k, g) in others.iter().enumerate() {
                emb.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).assign(&g.embeddings);
                adj.slice_mut(ndarray::s![k * n..(k + 1) * n, k * n..(k + 1) * n])
                    .assign(&g.adjacency);
            }
            Ok(GraphValues {
                embeddings: emb,
                adjacency: adj,
            })
        }
    }
}

/// Aligns every window of a batch against the reference built from the
/// remaining windows. Solves run in parallel; output order follows `graphs`.
pub fn batch_alignment(
    graphs: &[GraphValues],
    lambda: f64,
    beta: f64,
    omega: OmegaMode,
    settings: &AlignSettings,
    exec: Exec,
) -> Result<Vec<GaResult>> {
    if graphs.len() < 2 {
        return Err(Error::Contract(format!(
            "batch alignment needs at least 2 windows, got {}",
            graphs.len()
        )));
    }
    exec.map_range(graphs.len(), |i| {
        let reference = omega_reference(graphs, i, omega)?;
        let problem = AlignProblem {
            x_s: graphs[i].embeddings.clone(),
            a_s: graphs[i].adjacency.clone(),
            x_t: reference.embeddings,
            a_t: reference.adjacency,
            lambda,
            beta,
        };
        ga_distance(&problem, settings)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GraphValues {
        let embeddings = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
        let mut adjacency = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        for mut r in adjacency.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        GraphValues { embeddings, adjacency }
    }

    #[test]
    fn cost_matrix_examples() {
        let a = array![[0.0], [3.0]];
        let b = array![[4.0]];
        assert_eq!(cost_matrix(&a, &b).unwrap(), array![[4.0], [1.0]]);
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 3.0]];
        let c = cost_matrix(&x, &x).unwrap();
        for i in 0..3 {
            assert_eq!(c[[i, i]], 0.0);
            for j in 0..3 {
                assert_eq!(c[[i, j]], c[[j, i]]);
            }
        }
        assert!(cost_matrix(&a, &x).is_err());
    }

    #[test]
    fn identical_graphs_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 4, 3);
        let p = AlignProblem {
            x_s: g.embeddings.clone(),
            a_s: g.adjacency.clone(),
            x_t: g.embeddings.clone(),
            a_t: g.adjacency.clone(),
            lambda: 0.1,
            beta: 0.01,
        };
        let settings = AlignSettings {
            sinkhorn_max_iter: 2000,
            ..Default::default()
        };
        let r = ga_distance(&p, &settings).unwrap();
        // the node term is exact; the entropic edge plan keeps a little mass
        // between near-duplicate rows of a random stochastic adjacency
        assert!(r.wd_objective() < 1e-9);
        assert!(r.d_ga < 1e-3, "d_ga {}", r.d_ga);
    }

    #[test]
    fn lambda_scales_and_zero_disables() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, h) = (random_graph(&mut rng, 4, 3), random_graph(&mut rng, 4, 3));
        let mut p = AlignProblem {
            x_s: g.embeddings,
            a_s: g.adjacency,
            x_t: h.embeddings,
            a_t: h.adjacency,
            lambda: 0.0,
            beta: 0.05,
        };
        let s = AlignSettings::default();
        assert_eq!(ga_distance(&p, &s).unwrap().d_ga, 0.0);

        p.lambda = 0.1;
        let r = ga_distance(&p, &s).unwrap();
        let u = uniform(4);
        let wd = sinkhorn_wd(&cost_matrix(&p.x_s, &p.x_t).unwrap(), &u, &u, &s.sinkhorn(0.05)).unwrap();
        let gw = entropic_gwd(&p.a_s, &p.a_t, &u, &u, &s.gw(0.05)).unwrap();
        assert_abs_diff_eq!(r.d_ga, 0.1 * (wd.objective + gw.objective), epsilon = 1e-15);
    }

    #[test]
    fn ablations_drop_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, h) = (random_graph(&mut rng, 3, 2), random_graph(&mut rng, 3, 2));
        let p = AlignProblem {
            x_s: g.embeddings,
            a_s: g.adjacency,
            x_t: h.embeddings,
            a_t: h.adjacency,
            lambda: 1.0,
            beta: 0.05,
        };
        let run = |ablation| {
            ga_distance(&p, &AlignSettings { ablation, ..Default::default() }).unwrap()
        };
        let full = run(Ablation::Full);
        let no_wd = run(Ablation::NoWd);
        let no_gwd = run(Ablation::NoGwd);
        assert!(no_wd.wd.is_none() && no_gwd.gwd.is_none());
        assert_abs_diff_eq!(full.d_ga, no_wd.d_ga + no_gwd.d_ga, epsilon = 1e-15);
        assert_eq!(run(Ablation::NoGa).d_ga, 0.0);
    }

    #[test]
    fn batch_alignment_shapes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 3, 2);
        let s = AlignSettings { sinkhorn_max_iter: 2000, ..Default::default() };
        let out = batch_alignment(&[g.clone(), g.clone()], 0.1, 0.01, OmegaMode::Mean, &s, Exec::Parallel)
            .unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.d_ga < 1e-4));
        assert!(batch_alignment(&[g], 0.1, 0.01, OmegaMode::Mean, &s, Exec::Parallel).is_err());
    }

    #[test]
    fn permuted_adjacency_is_an_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = random_graph(&mut rng, 4, 3);
        let mut graphs: Vec<GraphValues> = (0..8)
            .map(|_| {
                let mut g = base.clone();
                g.embeddings.mapv_inplace(|x| x + 0.01 * (rng.random::<f64>() - 0.5));
                g
            })
            .collect();
        // window 5: same nodes, adjacency rows rewired by a cyclic shift of columns
        let a = graphs[5].adjacency.clone();
        graphs[5].adjacency = Array2::from_shape_fn((4, 4), |(i, j)| a[[i, (j + 1) % 4]]);
        let s = AlignSettings::default();
        let out = batch_alignment(&graphs, 0.1, 0.05, OmegaMode::Mean, &s, Exec::Sequential).unwrap();
        let mut others: Vec<f64> = out.iter().enumerate().filter(|(k, _)| *k != 5).map(|(_, r)| r.d_ga).collect();
        others.sort_by(f64::total_cmp);
        let median = others[others.len() / 2];
        assert!(out[5].d_ga > median, "{} vs median {}", out[5].d_ga, median);
    }

    #[test]
    fn concat_reference_has_all_other_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gs: Vec<GraphValues> = (0..4).map(|_| random_graph(&mut rng, 3, 2)).collect();
        let r = omega_reference(&gs, 1, OmegaMode::Concat).unwrap();
        assert_eq!(r.embeddings.dim(), (9, 2));
        assert_eq!(r.adjacency.dim(), (9, 9));
        for row in r.adjacency.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        let s = AlignSettings::default();
        let seq = batch_alignment(&gs, 0.1, 0.05, OmegaMode::Concat, &s, Exec::Sequential).unwrap();
        let par = batch_alignment(&gs, 0.1, 0.05, OmegaMode::Concat, &s, Exec::Parallel).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.d_ga.to_bits(), b.d_ga.to_bits());
        }
    }
}
