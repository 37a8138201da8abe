//! Brute-force enumeration oracles over permutation plans.
//!
//! A permutation `σ` stands for the matrix with `P[i, σ(i)] = 1`, so row `i`
//! of `P·Y` is row `σ(i)` of `Y`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::EdgeLoss;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot has a successor");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn permutation_matrix(perm: &[usize]) -> Array2<f64> {
    let n = perm.len();
    let mut p = Array2::zeros((n, n));
    for (i, &j) in perm.iter().enumerate() {
        p[[i, j]] = 1.0;
    }
    p
}

/// Exact transport between two uniform measures of equal size. The optimum
/// sits on a vertex of the Birkhoff polytope, so enumerating permutations
/// (each scaled by 1/n) is exact.
pub fn exact_uniform_ot(cost: &Array2<f64>) -> Result<(f64, Vec<usize>)> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::Contract(format!(
            "enumeration oracle needs a square cost, got {n}×{m}"
        )));
    }
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(n) {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64;
        if c < best.0 {
            best = (c, p);
        }
    }
    Ok(best)
}

/// Minimum GW cost over permutation plans with uniform weights.
pub fn exact_uniform_gw(a_s: &Array2<f64>, a_t: &Array2<f64>, loss: EdgeLoss) -> Result<(f64, Vec<usize>)> {
    let n = a_s.nrows();
    if a_s.dim() != (n, n) || a_t.dim() != (n, n) {
        return Err(Error::Contract("enumeration oracle needs equal-size square graphs".into()));
    }
    let w = 1.0 / (n * n) as f64;
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(n) {
        let mut c = 0.0;
        for i in 0..n {
            for i2 in 0..n {
                c += loss.eval(a_s[[i, i2]], a_t[[p[i], p[i2]]]);
            }
        }
        c *= w;
        if c < best.0 {
            best = (c, p);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct EquivalenceOutcome {
    pub holds: bool,
    /// Permutations minimizing `‖P·A_s·X_s − A_t·X_t‖²_F`.
    pub frobenius_argmin: Vec<Vec<usize>>,
    /// Permutations maximizing `⟨P, A_s·X_s·(A_t·X_t)ᵀ⟩_F`.
    pub inner_argmax: Vec<Vec<usize>>,
    pub min_frobenius: f64,
    pub max_inner: f64,
}

fn optimal_set(values: &[(Vec<usize>, f64)], best: f64, scale: f64) -> Vec<Vec<usize>> {
    let tol = 1e-9 * scale.max(1.0);
    let mut set: Vec<Vec<usize>> = values
        .iter()
        .filter(|(_, v)| (v - best).abs() <= tol)
        .map(|(p, _)| p.clone())
        .collect();
    set.sort();
    set
}

/// Enumerates every permutation and compares the Frobenius-distance minimizers
/// with the inner-product maximizers.
///
/// `⟨P, Y·Zᵀ⟩ = ⟨Pᵀ·Z, Y⟩`, so the inner-product form scores the transposed
/// plan: the check holds when the argmax set, with each permutation inverted,
/// equals the argmin set (ties included).
pub fn equivalence_check(
    a_s: &Array2<f64>,
    x_s: &Array2<f64>,
    a_t: &Array2<f64>,
    x_t: &Array2<f64>,
) -> Result<EquivalenceOutcome> {
    let n = a_s.nrows();
    let m = a_t.nrows();
    if n != m {
        return Err(Error::Contract(format!(
            "alignment by permutation needs equal node counts, got {n} and {m}"
        )));
    }
    if n > 8 {
        return Err(Error::Contract(format!("{n}! permutations is too many to enumerate")));
    }
    let y = a_s.dot(x_s);
    let z = a_t.dot(x_t);
    if y.dim() != z.dim() {
        return Err(Error::shape("equivalence_check", &[y.nrows(), y.ncols()], &[z.nrows(), z.ncols()]));
    }
    let inner_matrix = y.dot(&z.t());
    let scale = y.iter().chain(z.iter()).map(|x| x * x).sum::<f64>();

    let perms = permutations(n);
    let frob: Vec<(Vec<usize>, f64)> = perms
        .iter()
        .map(|p| {
            let d: f64 = (0..n)
                .map(|i| {
                    y.row(p[i])
                        .iter()
                        .zip(z.row(i).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            (p.clone(), d)
        })
        .collect();
    let inner: Vec<(Vec<usize>, f64)> = perms
        .iter()
        .map(|p| {
            let s: f64 = p.iter().enumerate().map(|(i, &j)| inner_matrix[[i, j]]).sum();
            (p.clone(), s)
        })
        .collect();

    let min_frobenius = frob.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let max_inner = inner.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let frobenius_argmin = optimal_set(&frob, min_frobenius, scale);
    let inner_argmax = optimal_set(&inner, max_inner, scale);

    let mut transposed: Vec<Vec<usize>> = inner_argmax.iter().map(|p| inverse(p)).collect();
    transposed.sort();
    Ok(EquivalenceOutcome {
        holds: transposed == frobenius_argmin,
        frobenius_argmin,
        inner_argmax,
        min_frobenius,
        max_inner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn permutation_counts() {
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(5).len(), 120);
        let p = permutations(4);
        let mut sorted = p.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 24);
    }

    #[test]
    fn exact_ot_picks_the_diagonal() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let (c, p) = exact_uniform_ot(&cost).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(p, vec![0, 1]);
    }

    #[test]
    fn random_instances_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = 3;
            let mut r = |a, b| Array2::from_shape_fn((a, b), |_| rng.random::<f64>());
            let (a_s, x_s, a_t, x_t) = (r(n, n), r(n, 2), r(n, n), r(n, 2));
            assert!(equivalence_check(&a_s, &x_s, &a_t, &x_t).unwrap().holds);
        }
    }

    #[test]
    fn planted_permutation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let a_s = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let x_s = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>());
        let p0 = vec![2, 0, 3, 1];
        let x_t = permutation_matrix(&p0).dot(&a_s).dot(&x_s);
        let out = equivalence_check(&a_s, &x_s, &Array2::eye(n), &x_t).unwrap();
        assert!(out.holds);
        assert_eq!(out.frobenius_argmin, vec![p0.clone()]);
        assert!(out.min_frobenius < 1e-20);
        assert_eq!(out.inner_argmax, vec![inverse(&p0)]);
    }

    #[test]
    fn trivial_and_invalid_sizes() {
        let one = array![[0.7]];
        let x = array![[1.5, -2.0]];
        assert!(equivalence_check(&one, &x, &one, &x).unwrap().holds);
        let two = Array2::eye(2);
        assert!(equivalence_check(&one, &x, &two, &Array2::zeros((2, 2))).is_err());
    }
}
