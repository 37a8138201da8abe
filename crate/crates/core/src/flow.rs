//! Conditional masked autoregressive flow over per-channel window vectors.
//!
//! Each layer maps `x` to `z_k = x_k·exp(s_k) + m_k`, where `s_k` and `m_k`
//! come from a one-hidden-layer MADE that sees the coordinates preceding `k`
//! in the layer's ordering plus the (unmasked) condition vector. Orderings
//! alternate between identity and reversed from layer to layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tape, Tensor, Var};

/// Raw scale outputs are squashed to `[-SCALE_BOUND, SCALE_BOUND]`.
pub const SCALE_BOUND: f64 = 5.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowLayer {
    /// `T × H`
    pub w_in: Tensor,
    /// `d × H`
    pub w_cond: Tensor,
    /// `1 × H`
    pub b_hidden: Tensor,
    /// `H × T`
    pub w_scale: Tensor,
    /// `d × T`
    pub c_scale: Tensor,
    /// `1 × T`
    pub b_scale: Tensor,
    /// `H × T`
    pub w_shift: Tensor,
    /// `d × T`
    pub c_shift: Tensor,
    /// `1 × T`
    pub b_shift: Tensor,
    /// `order[p]` is the coordinate at autoregressive position `p`.
    order: Vec<usize>,
    in_mask: Tensor,
    out_mask: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct FlowLayerVars {
    pub w_in: Var,
    pub w_cond: Var,
    pub b_hidden: Var,
    pub w_scale: Var,
    pub c_scale: Var,
    pub b_scale: Var,
    pub w_shift: Var,
    pub c_shift: Var,
    pub b_shift: Var,
}

#[derive(Clone, Debug)]
pub struct FlowVars {
    pub layers: Vec<FlowLayerVars>,
}

impl FlowVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w_in, l.w_cond, l.b_hidden, l.w_scale, l.c_scale, l.b_scale, l.w_shift,
                    l.c_shift, l.b_shift,
                ]
            })
            .collect()
    }
}

/// MADE degree masks for a given ordering.
fn masks(order: &[usize], hidden: usize) -> (Tensor, Tensor) {
    let dim = order.len();
    let mut degree = vec![0usize; dim];
    for (pos, &k) in order.iter().enumerate() {
        degree[k] = pos + 1;
    }
    let span = dim.saturating_sub(1).max(1);
    let hidden_degree: Vec<usize> = (0..hidden).map(|h| h % span + 1).collect();
    let in_mask = Tensor::from_fn(dim, hidden, |k, h| f64::from(hidden_degree[h] >= degree[k]));
    let out_mask = Tensor::from_fn(hidden, dim, |h, k| f64::from(degree[k] > hidden_degree[h]));
    (in_mask, out_mask)
}

fn mask_inplace(t: &mut Tensor, mask: &Tensor) {
    for (x, m) in t.data_mut().iter_mut().zip(mask.data()) {
        *x *= m;
    }
}

fn bound_scale(raw: f64) -> f64 {
    SCALE_BOUND * (raw / SCALE_BOUND).tanh()
}

impl FlowLayer {
    fn new(dim: usize, cond_dim: usize, hidden: usize, reversed: bool, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..dim).collect();
        if reversed {
            order.reverse();
        }
        let (in_mask, out_mask) = masks(&order, hidden);
        let std_in = (2.0 / (dim + hidden) as f64).sqrt();
        let std_c = (2.0 / (cond_dim + hidden) as f64).sqrt();
        let n_in = Normal::new(0.0, std_in).expect("valid std");
        let n_c = Normal::new(0.0, std_c).expect("valid std");
        let mut w_in = Tensor::from_fn(dim, hidden, |_, _| n_in.sample(rng));
        mask_inplace(&mut w_in, &in_mask);
        FlowLayer {
            w_in,
            w_cond: Tensor::from_fn(cond_dim, hidden, |_, _| n_c.sample(rng)),
            b_hidden: Tensor::zeros(&[1, hidden]),
            w_scale: Tensor::zeros(&[hidden, dim]),
            c_scale: Tensor::zeros(&[cond_dim, dim]),
            b_scale: Tensor::zeros(&[1, dim]),
            w_shift: Tensor::zeros(&[hidden, dim]),
            c_shift: Tensor::zeros(&[cond_dim, dim]),
            b_shift: Tensor::zeros(&[1, dim]),
            order,
            in_mask,
            out_mask,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_in,
            &self.w_cond,
            &self.b_hidden,
            &self.w_scale,
            &self.c_scale,
            &self.b_scale,
            &self.w_shift,
            &self.c_shift,
            &self.b_shift,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_in,
            &mut self.w_cond,
            &mut self.b_hidden,
            &mut self.w_scale,
            &mut self.c_scale,
            &mut self.b_scale,
            &mut self.w_shift,
            &mut self.c_shift,
            &mut self.b_shift,
        ]
    }

    /// Scale (bounded) and shift for every coordinate of a single input.
    fn conditioner(&self, x: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dim = x.len();
        let hidden = self.b_hidden.cols();
        let mut h = self.b_hidden.data().to_vec();
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let w = self.w_in.row(k);
            let m = self.in_mask.row(k);
            for j in 0..hidden {
                h[j] += xk * w[j] * m[j];
            }
        }
        for (r, &cr) in c.iter().enumerate() {
            let w = self.w_cond.row(r);
            for j in 0..hidden {
                h[j] += cr * w[j];
            }
        }
        for v in &mut h {
            *v = v.max(0.0);
        }
        let mut s = self.b_scale.data().to_vec();
        let mut m = self.b_shift.data().to_vec();
        for (j, &hj) in h.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            let (ws, wm, mask) = (self.w_scale.row(j), self.w_shift.row(j), self.out_mask.row(j));
            for k in 0..dim {
                s[k] += hj * ws[k] * mask[k];
                m[k] += hj * wm[k] * mask[k];
            }
        }
        for (r, &cr) in c.iter().enumerate() {
            let (cs, cm) = (self.c_scale.row(r), self.c_shift.row(r));
            for k in 0..dim {
                s[k] += cr * cs[k];
                m[k] += cr * cm[k];
            }
        }
        for v in &mut s {
            *v = bound_scale(*v);
        }
        (s, m)
    }

    fn forward(&self, x: &[f64], c: &[f64]) -> (Vec<f64>, f64) {
        let (s, m) = self.conditioner(x, c);
        let z = x.iter().zip(&s).zip(&m).map(|((x, s), m)| x * s.exp() + m).collect();
        (z, s.iter().sum())
    }

    /// Inverts one layer one coordinate at a time in autoregressive order.
    fn inverse(&self, z: &[f64], c: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; z.len()];
        for &k in &self.order {
            let (s, m) = self.conditioner(&x, c);
            x[k] = (z[k] - m[k]) * (-s[k]).exp();
        }
        x
    }

    fn bind(&self, tape: &mut Tape, leaf: bool) -> FlowLayerVars {
        let mut put = |t: &Tensor| if leaf { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        FlowLayerVars {
            w_in: put(&self.w_in),
            w_cond: put(&self.w_cond),
            b_hidden: put(&self.b_hidden),
            w_scale: put(&self.w_scale),
            c_scale: put(&self.c_scale),
            b_scale: put(&self.b_scale),
            w_shift: put(&self.w_shift),
            c_shift: put(&self.c_shift),
            b_shift: put(&self.b_shift),
        }
    }

    /// Rows of `x` (`R × T`) with conditions `c` (`R × d`); returns `z` and the
    /// per-row log-determinant (`R × 1`).
    fn forward_on(&self, tape: &mut Tape, v: &FlowLayerVars, x: Var, c: Var) -> Result<(Var, Var)> {
        let in_mask = tape.constant(self.in_mask.clone());
        let out_mask = tape.constant(self.out_mask.clone());
        let w_in = tape.mul(v.w_in, in_mask)?;
        let w_scale = tape.mul(v.w_scale, out_mask)?;
        let w_shift = tape.mul(v.w_shift, out_mask)?;

        let xh = tape.matmul(x, w_in)?;
        let ch = tape.matmul(c, v.w_cond)?;
        let pre = tape.add(xh, ch)?;
        let pre = tape.add(pre, v.b_hidden)?;
        let h = tape.relu(pre);

        let hs = tape.matmul(h, w_scale)?;
        let cs = tape.matmul(c, v.c_scale)?;
        let raw = tape.add(hs, cs)?;
        let raw = tape.add(raw, v.b_scale)?;
        let squashed = tape.scale(raw, 1.0 / SCALE_BOUND);
        let squashed = tape.tanh(squashed);
        let s = tape.scale(squashed, SCALE_BOUND);

        let hm = tape.matmul(h, w_shift)?;
        let cm = tape.matmul(c, v.c_shift)?;
        let m = tape.add(hm, cm)?;
        let m = tape.add(m, v.b_shift)?;

        let es = tape.exp(s);
        let xs = tape.mul(x, es)?;
        let z = tape.add(xs, m)?;
        let log_det = tape.sum_rows(s)?;
        Ok((z, log_det))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub layers: Vec<FlowLayer>,
    dim: usize,
    cond_dim: usize,
    hidden: usize,
}

impl FlowModel {
    /// Fresh flow whose scale and shift outputs start at zero, so it begins
    /// as the identity map.
    pub fn new(dim: usize, cond_dim: usize, hidden: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 || depth == 0 {
            return Err(Error::Config(format!(
                "flow needs positive dimension, hidden width and depth (got {dim}, {hidden}, {depth})"
            )));
        }
        let layers = (0..depth)
            .map(|l| FlowLayer::new(dim, cond_dim, hidden, l % 2 == 1, rng))
            .collect();
        Ok(FlowModel {
            layers,
            dim,
            cond_dim,
            hidden,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("flow.{l}.{name}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("flow.{l}.{name}"), t));
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> FlowVars {
        FlowVars {
            layers: self.layers.iter().map(|l| l.bind(tape, true)).collect(),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> FlowVars {
        FlowVars {
            layers: self.layers.iter().map(|l| l.bind(tape, false)).collect(),
        }
    }

    fn check_inputs(&self, x: &[f64], c: &[f64]) -> Result<()> {
        if x.len() != self.dim || c.len() != self.cond_dim {
            return Err(Error::shape("flow", &[x.len(), c.len()], &[self.dim, self.cond_dim]));
        }
        Ok(())
    }

    /// `(z, log|det ∂z/∂x|)`.
    pub fn forward(&self, x: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_inputs(x, c)?;
        let mut cur = x.to_vec();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (z, ld) = layer.forward(&cur, c);
            cur = z;
            log_det += ld;
        }
        Ok((cur, log_det))
    }

    pub fn inverse(&self, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(z, c)?;
        let mut cur = z.to_vec();
        for layer in self.layers.iter().rev() {
            cur = layer.inverse(&cur, c);
        }
        Ok(cur)
    }

    pub fn log_prob(&self, x: &[f64], c: &[f64]) -> Result<f64> {
        let (z, log_det) = self.forward(x, c)?;
        Ok(gaussian_log_density(&z) + log_det)
    }

    /// Mean log-likelihood over `(x, C)` pairs.
    pub fn batch_log_likelihood(&self, pairs: &[(&[f64], &[f64])]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let lps = pairs
            .iter()
            .map(|(x, c)| self.log_prob(x, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(pairwise_sum(&lps) / lps.len() as f64)
    }
}

const LAYER_NAMES: [&str; 9] = [
    "w_in", "w_cond", "b_hidden", "w_scale", "c_scale", "b_scale", "w_shift", "c_shift", "b_shift",
];

pub fn gaussian_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - z.len() as f64 * HALF_LN_2PI
}

/// Per-row log-probabilities (`R × 1`) of `x` (`R × T`) given `c` (`R × d`).
pub fn log_prob_on(tape: &mut Tape, model: &FlowModel, vars: &FlowVars, x: Var, c: Var) -> Result<Var> {
    if tape.shape(x).len() != 2 || tape.shape(x)[1] != model.dim {
        return Err(Error::shape("flow", tape.shape(x), &[0, model.dim]));
    }
    if tape.shape(c) != [tape.shape(x)[0], model.cond_dim] {
        return Err(Error::shape("flow", tape.shape(c), &[tape.shape(x)[0], model.cond_dim]));
    }
    let mut cur = x;
    let mut log_det: Option<Var> = None;
    for (layer, v) in model.layers.iter().zip(&vars.layers) {
        let (z, ld) = layer.forward_on(tape, v, cur, c)?;
        cur = z;
        log_det = Some(match log_det {
            Some(acc) => tape.add(acc, ld)?,
            None => ld,
        });
    }
    let sq = tape.mul(cur, cur)?;
    let norm = tape.sum_rows(sq)?;
    let base = tape.scale(norm, -0.5);
    let base = tape.add_scalar(base, -(model.dim as f64) * HALF_LN_2PI);
    tape.add(base, log_det.expect("depth is positive"))
}

/// Mean of [`log_prob_on`] over the rows: the flow term of the training loss.
pub fn batch_log_likelihood_on(tape: &mut Tape, model: &FlowModel, vars: &FlowVars, x: Var, c: Var) -> Result<Var> {
    let lp = log_prob_on(tape, model, vars, x, c)?;
    Ok(tape.mean(lp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(model: &mut FlowModel, rng: &mut ChaCha8Rng, scale: f64) {
        for (_, t) in model.named_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    fn vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn identity_init_is_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = FlowModel::new(6, 4, 10, 2, &mut rng).unwrap();
        for _ in 0..50 {
            let (x, c) = (vec(&mut rng, 6), vec(&mut rng, 4));
            let (z, ld) = model.forward(&x, &c).unwrap();
            assert_eq!(z, x);
            assert_eq!(ld, 0.0);
            let expect = -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 3.0 * (2.0 * std::f64::consts::PI).ln();
            assert_abs_diff_eq!(model.log_prob(&x, &c).unwrap(), expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = FlowModel::new(1, 2, 4, 1, &mut rng).unwrap();
        let (s, m) = (0.7, -0.3);
        model.layers[0].b_scale.data_mut()[0] = SCALE_BOUND * (s / SCALE_BOUND).atanh();
        model.layers[0].b_shift.data_mut()[0] = m;
        for x in [-1.5, 0.0, 0.4, 2.2] {
            let z: f64 = s.exp() * x + m;
            let expect = -0.5 * z * z - HALF_LN_2PI + s;
            assert_abs_diff_eq!(model.log_prob(&[x], &[0.3, -0.8]).unwrap(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_det_matches_numeric_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in 1..=4 {
            let mut model = FlowModel::new(dim, 3, 8, 2, &mut rng).unwrap();
            randomize(&mut model, &mut rng, 0.5);
            let (x, c) = (vec(&mut rng, dim), vec(&mut rng, 3));
            let eps = 1e-6;
            let mut jac = ndarray::Array2::<f64>::zeros((dim, dim));
            for j in 0..dim {
                let (mut hi, mut lo) = (x.clone(), x.clone());
                hi[j] += eps;
                lo[j] -= eps;
                let (zh, _) = model.forward(&hi, &c).unwrap();
                let (zl, _) = model.forward(&lo, &c).unwrap();
                for i in 0..dim {
                    jac[[i, j]] = (zh[i] - zl[i]) / (2.0 * eps);
                }
            }
            let det = determinant(jac);
            let (_, ld) = model.forward(&x, &c).unwrap();
            assert_abs_diff_eq!(det.abs().ln(), ld, epsilon = 1e-4);
        }
    }

    fn determinant(mut a: ndarray::Array2<f64>) -> f64 {
        let n = a.nrows();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
                .unwrap();
            if pivot != col {
                for k in 0..n {
                    a.swap([pivot, k], [col, k]);
                }
                det = -det;
            }
            let p = a[[col, col]];
            det *= p;
            for r in col + 1..n {
                let f = a[[r, col]] / p;
                for k in col..n {
                    a[[r, k]] -= f * a[[col, k]];
                }
            }
        }
        det
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = FlowModel::new(5, 3, 12, 2, &mut rng).unwrap();
        randomize(&mut model, &mut rng, 0.4);
        for _ in 0..1000 {
            let (x, c) = (vec(&mut rng, 5), vec(&mut rng, 3));
            let (z, _) = model.forward(&x, &c).unwrap();
            let back = model.inverse(&z, &c).unwrap();
            for (a, b) in back.iter().zip(&x) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn each_layer_is_autoregressive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FlowModel::new(5, 2, 12, 2, &mut rng).unwrap();
        randomize(&mut model, &mut rng, 0.8);
        let c = vec(&mut rng, 2);
        for layer in &model.layers {
            let x = vec(&mut rng, 5);
            let (z0, _) = layer.forward(&x, &c);
            for (pos_in, &k_in) in layer.order().iter().enumerate() {
                let mut xp = x.clone();
                xp[k_in] += 0.37;
                let (z1, _) = layer.forward(&xp, &c);
                for (pos_out, &k_out) in layer.order().iter().enumerate() {
                    let moved = (z1[k_out] - z0[k_out]).abs() > 0.0;
                    if pos_out < pos_in {
                        assert!(!moved, "z[{k_out}] moved after perturbing x[{k_in}]");
                    }
                    if pos_out == pos_in {
                        assert!(moved);
                    }
                }
            }
        }
        assert_eq!(model.layers[0].order(), &[0, 1, 2, 3, 4]);
        assert_eq!(model.layers[1].order(), &[4, 3, 2, 1, 0]);
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = FlowModel::new(1, 2, 6, 2, &mut rng).unwrap();
        randomize(&mut model, &mut rng, 0.6);
        let c = [0.5, -1.0];
        let (lo, hi, n) = (-60.0, 60.0, 240_000);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * model.log_prob(&[x], &c).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn tape_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = FlowModel::new(4, 3, 7, 2, &mut rng).unwrap();
        randomize(&mut model, &mut rng, 0.5);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| vec(&mut rng, 4)).collect();
        let cs: Vec<Vec<f64>> = (0..5).map(|_| vec(&mut rng, 3)).collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(5, 4, |i, j| xs[i][j]));
        let c = tape.constant(Tensor::from_fn(5, 3, |i, j| cs[i][j]));
        let lp = log_prob_on(&mut tape, &model, &vars, x, c).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(tape.value(lp).at(i, 0), model.log_prob(&xs[i], &cs[i]).unwrap(), epsilon = 1e-12);
        }
        let mean = batch_log_likelihood_on(&mut tape, &model, &vars, x, c).unwrap();
        let pairs: Vec<(&[f64], &[f64])> = xs.iter().zip(&cs).map(|(x, c)| (x.as_slice(), c.as_slice())).collect();
        assert_abs_diff_eq!(tape.value(mean).item(), model.batch_log_likelihood(&pairs).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn batch_mean_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = FlowModel::new(3, 2, 5, 2, &mut rng).unwrap();
        randomize(&mut model, &mut rng, 0.5);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| vec(&mut rng, 3)).collect();
        let c = vec(&mut rng, 2);
        let pairs: Vec<(&[f64], &[f64])> = xs.iter().map(|x| (x.as_slice(), c.as_slice())).collect();
        let one = model.batch_log_likelihood(&pairs[..1]).unwrap();
        assert_eq!(one, model.log_prob(&xs[0], &c).unwrap());
        let base = model.batch_log_likelihood(&pairs).unwrap();
        let doubled: Vec<_> = pairs.iter().chain(pairs.iter()).cloned().collect();
        assert_abs_diff_eq!(model.batch_log_likelihood(&doubled).unwrap(), base, epsilon = 1e-12);
        assert!(model.batch_log_likelihood(&[]).is_err());
        assert!(model.log_prob(&[0.0; 2], &c).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = FlowModel::new(3, 2, 5, 2, &mut rng).unwrap();
        randomize(&mut model, &mut rng, 0.5);
        let mut inputs: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
        let np = inputs.len();
        inputs.push(Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)));
        inputs.push(Tensor::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)));
        let report = crate::gradcheck::check(&inputs, |tape, v| {
            let layers = v[..np]
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
            batch_log_likelihood_on(tape, &model, &FlowVars { layers }, v[np], v[np + 1])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
