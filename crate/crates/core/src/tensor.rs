//! Dense `f64` tensors with a record-on-forward reverse-mode tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every leaf that was
//! registered with `requires_grad`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Tensor {
            shape: vec![m, n],
            data: gemm(&self.data, &other.data, m, k, n),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// C = Aᵀ·B for A (k×m), B (k×n).
fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

/// C = A·Bᵀ for A (m×k), B (n×k).
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

/// Output shape of a broadcasting binary op. The smaller operand must equal
/// a trailing suffix of the larger one (ignoring leading unit dimensions).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (sa, sb) = (strip_leading_ones(a), strip_leading_ones(b));
    if sa.ends_with(sb) {
        Ok(a.to_vec())
    } else if sb.ends_with(sa) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums a full-size gradient down to an operand that was broadcast.
fn reduce_to(len: usize, g: &[f64]) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, &v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unary {
    Exp,
    Log,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Pairwise edge loss used by [`Tape::gromov_transport`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLoss {
    /// |a - b|
    #[default]
    Absolute,
    /// (a - b)^2
    Square,
}

impl EdgeLoss {
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            EdgeLoss::Absolute => (a - b).abs(),
            EdgeLoss::Square => (a - b) * (a - b),
        }
    }

    /// Derivative with respect to `a`; zero at the kink of `Absolute`.
    pub fn deriv(self, a: f64, b: f64) -> f64 {
        match self {
            EdgeLoss::Absolute => {
                let d = a - b;
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            EdgeLoss::Square => 2.0 * (a - b),
        }
    }
}

impl std::str::FromStr for EdgeLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(EdgeLoss::Absolute),
            "square" => Ok(EdgeLoss::Square),
            _ => Err(Error::Config(format!("edge loss must be absolute or square, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for EdgeLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeLoss::Absolute => "absolute",
            EdgeLoss::Square => "square",
        })
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    BlockDiag(Vec<Var>),
    Transport {
        src: Var,
        dst: Var,
        plan: Tensor,
    },
    GromovTransport {
        src: Var,
        dst: Var,
        plan: Tensor,
        loss: EdgeLoss,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf: gradients flow into it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.require_matrix("transpose", a)?;
        let value = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), g))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, &ta.shape, &tb.shape)?;
        let n: usize = shape.iter().product();
        let (la, lb) = (ta.len(), tb.len());
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let data = (0..n).map(|i| f(ta.data[i % la], tb.data[i % lb])).collect();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Binary(op, a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let g = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), g)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = match op {
            Unary::Exp => t.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = t.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("input {bad} is not strictly positive"),
                    });
                }
                t.map(f64::ln)
            }
            Unary::Relu => t.map(|x| x.max(0.0)),
            Unary::Sigmoid => t.map(sigmoid),
            Unary::Tanh => t.map(f64::tanh),
            Unary::Abs => t.map(f64::abs),
        };
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Unary(op, a), g))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix("softmax_rows", a)?;
        let t = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::SoftmaxRows(a), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = pairwise_sum(&self.value(a).data);
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = pairwise_sum(&t.data) / t.len() as f64;
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), g)
    }

    /// Sums each row of an m×n matrix into an m×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix("sum_rows", a)?;
        let t = self.value(a);
        let data = (0..m)
            .map(|i| t.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![m, 1], data)?, Op::SumRows(a), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let (m, _) = self.require_matrix("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.require_matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            g,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let (_, n) = self.require_matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.require_matrix("concat_rows", p)?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pm;
            data.extend_from_slice(&self.value(p).data);
        }
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            g,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.require_matrix("slice_cols", a)?;
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} out of range for {n} columns"
            )));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.data[i * n + start..i * n + end]);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![m, end - start], data)?,
            Op::SliceCols(a, start, end),
            g,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.require_matrix("slice_rows", a)?;
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of range for {m} rows"
            )));
        }
        let data = self.value(a).data[start * n..end * n].to_vec();
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![end - start, n], data)?,
            Op::SliceRows(a, start, end),
            g,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), g))
    }

    /// Block-diagonal matrix from square blocks.
    pub fn block_diag(&mut self, blocks: &[Var]) -> Result<Var> {
        let mut sizes = Vec::with_capacity(blocks.len());
        for &b in blocks {
            let (m, n) = self.require_matrix("block_diag", b)?;
            if m != n {
                return Err(Error::shape("block_diag", &[m, n], &[m, m]));
            }
            sizes.push(m);
        }
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::Contract("block_diag of zero blocks".into()));
        }
        let mut data = vec![0.0; total * total];
        let mut off = 0;
        for (&b, &s) in blocks.iter().zip(&sizes) {
            let t = self.value(b);
            for i in 0..s {
                data[(off + i) * total + off..(off + i) * total + off + s]
                    .copy_from_slice(t.row(i));
            }
            off += s;
        }
        let g = self.any_grad(blocks);
        Ok(self.push(
            Tensor::new(vec![total, total], data)?,
            Op::BlockDiag(blocks.to_vec()),
            g,
        ))
    }

    /// Transport cost `Σ_ij plan_ij · ‖src_i − dst_j‖₂` with the plan held
    /// constant (envelope-theorem gradient).
    pub fn transport(&mut self, src: Var, dst: Var, plan: &Tensor) -> Result<Var> {
        let (n, d) = self.require_matrix("transport", src)?;
        let (m, d2) = self.require_matrix("transport", dst)?;
        if d != d2 || plan.shape() != [n, m] {
            return Err(Error::shape("transport", &[n, m, d], &[plan.rows(), plan.cols(), d2]));
        }
        let (xs, ys) = (self.value(src), self.value(dst));
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = plan.at(i, j);
                if p != 0.0 {
                    total += p * euclid(xs.row(i), ys.row(j));
                }
            }
        }
        let g = self.any_grad(&[src, dst]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Transport {
                src,
                dst,
                plan: plan.clone(),
            },
            g,
        ))
    }

    /// Gromov-Wasserstein cost `Σ plan_ij plan_i'j' L(src_ii', dst_jj')` with
    /// the plan held constant.
    pub fn gromov_transport(
        &mut self,
        src: Var,
        dst: Var,
        plan: &Tensor,
        loss: EdgeLoss,
    ) -> Result<Var> {
        let (n, n2) = self.require_matrix("gromov_transport", src)?;
        let (m, m2) = self.require_matrix("gromov_transport", dst)?;
        if n != n2 || m != m2 || plan.shape() != [n, m] {
            return Err(Error::shape("gromov_transport", &[n, m], plan.shape()));
        }
        let total = gromov_value(self.value(src), self.value(dst), plan, loss);
        let g = self.any_grad(&[src, dst]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::GromovTransport {
                src,
                dst,
                plan: plan.clone(),
                loss,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Grads { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, gemm_nt(g, &tb.data, m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, gemm_tn(&ta.data, g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = g[i * n + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (la, lb) = (ta.len(), tb.len());
                match op {
                    Binary::Add => {
                        self.accumulate(grads, *a, reduce_to(la, g));
                        self.accumulate(grads, *b, reduce_to(lb, g));
                    }
                    Binary::Sub => {
                        self.accumulate(grads, *a, reduce_to(la, g));
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        self.accumulate(grads, *b, reduce_to(lb, &neg));
                    }
                    Binary::Mul => {
                        if self.nodes[a.0].needs_grad {
                            let ga: Vec<f64> = g
                                .iter()
                                .enumerate()
                                .map(|(i, x)| x * tb.data[i % lb])
                                .collect();
                            self.accumulate(grads, *a, reduce_to(la, &ga));
                        }
                        if self.nodes[b.0].needs_grad {
                            let gb: Vec<f64> = g
                                .iter()
                                .enumerate()
                                .map(|(i, x)| x * ta.data[i % la])
                                .collect();
                            self.accumulate(grads, *b, reduce_to(lb, &gb));
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Unary(op, a) => {
                let x = &self.value(*a).data;
                let y = &out.data;
                let d: Vec<f64> = match op {
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                        .collect(),
                };
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out.data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        d[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let (m, n) = (t.rows(), t.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = g[i]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (m, n) = (t.rows(), t.cols());
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(m * n);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + off..i * total + off + n]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let t = self.value(*a);
                let (m, n) = (t.rows(), t.cols());
                let w = end - start;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start, end) => {
                let t = self.value(*a);
                let n = t.cols();
                let mut d = vec![0.0; t.len()];
                d[start * n..end * n].copy_from_slice(g);
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::BlockDiag(blocks) => {
                let total = out.cols();
                let mut off = 0;
                for &b in blocks {
                    let s = self.value(b).rows();
                    let mut d = Vec::with_capacity(s * s);
                    for i in 0..s {
                        d.extend_from_slice(&g[(off + i) * total + off..(off + i) * total + off + s]);
                    }
                    self.accumulate(grads, b, d);
                    off += s;
                }
            }
            Op::Transport { src, dst, plan } => {
                let (xs, ys) = (self.value(*src), self.value(*dst));
                let (n, m, d) = (xs.rows(), ys.rows(), xs.cols());
                let mut gx = vec![0.0; n * d];
                let mut gy = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let p = plan.at(i, j);
                        if p == 0.0 {
                            continue;
                        }
                        let (xi, yj) = (xs.row(i), ys.row(j));
                        let dist = euclid(xi, yj);
                        if dist == 0.0 {
                            continue;
                        }
                        let w = g[0] * p / dist;
                        for k in 0..d {
                            let diff = w * (xi[k] - yj[k]);
                            gx[i * d + k] += diff;
                            gy[j * d + k] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *src, gx);
                self.accumulate(grads, *dst, gy);
            }
            Op::GromovTransport {
                src,
                dst,
                plan,
                loss,
            } => {
                let (a, b) = (self.value(*src), self.value(*dst));
                let (n, m) = (a.rows(), b.rows());
                let mut ga = vec![0.0; n * n];
                let mut gb = vec![0.0; m * m];
                for i in 0..n {
                    for i2 in 0..n {
                        let aii = a.at(i, i2);
                        for j in 0..m {
                            let pij = plan.at(i, j);
                            if pij == 0.0 {
                                continue;
                            }
                            for j2 in 0..m {
                                let w = g[0] * pij * plan.at(i2, j2);
                                let dl = w * loss.deriv(aii, b.at(j, j2));
                                ga[i * n + i2] += dl;
                                gb[j * m + j2] -= dl;
                            }
                        }
                    }
                }
                self.accumulate(grads, *src, ga);
                self.accumulate(grads, *dst, gb);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn gromov_value(a: &Tensor, b: &Tensor, plan: &Tensor, loss: EdgeLoss) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let pij = plan.at(i, j);
            if pij == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for i2 in 0..n {
                let aii = a.at(i, i2);
                for j2 in 0..m {
                    inner += plan.at(i2, j2) * loss.eval(aii, b.at(j, j2));
                }
            }
            total += pij * inner;
        }
    }
    total
}

/// Pairwise (cascade) summation; order-deterministic.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let ones = m(2, 1, &[1., 1.]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3., 7.]);

        let b = m(2, 3, &[1., -2., 0.5, 3., 4., -1.]);
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);

        let z = Tensor::zeros(&[2, 3]);
        let any = m(3, 2, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1., 0., 2.]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);

        let p = tape.leaf(Tensor::new(vec![3], vec![0.1, 1.0, 7.5]).unwrap());
        let l = tape.log(p).unwrap();
        let e = tape.exp(l);
        for (a, b) in tape.value(e).data().iter().zip(tape.value(p).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(3, 2, &[4.0, 4.0, 0.0, 3f64.ln(), 1000.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        assert_abs_diff_eq!(v.at(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v.at(1, 0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(v.at(1, 1), 0.75, epsilon = 1e-15);
        assert_eq!(v.at(2, 0), 1.0);
        assert!(v.at(2, 1) >= 0.0 && v.at(2, 1) < 1e-300);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1., 2.]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(Tensor::new(vec![3], vec![10., 20., 30.]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2., 2., 2.]);

        let bad = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn outputs_do_not_alias_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(1, 2, &[1., 2.]));
        let b = tape.add_scalar(a, 0.0);
        let mut copy = tape.value(b).clone();
        copy.data_mut()[0] = 99.0;
        assert_eq!(tape.value(a).data(), &[1., 2.]);
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        // z = 2x², dz/dx = 4x
        assert_eq!(g.get(x).unwrap().item(), 12.0);
    }

    #[test]
    fn block_diag_layout() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(1, 1, &[1.]));
        let b = tape.leaf(m(2, 2, &[2., 3., 4., 5.]));
        let d = tape.block_diag(&[a, b]).unwrap();
        assert_eq!(
            tape.value(d).data(),
            &[1., 0., 0., 0., 2., 3., 0., 4., 5.]
        );
    }
}
