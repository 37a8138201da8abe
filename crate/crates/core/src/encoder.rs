//! Conditional encoder: a per-channel LSTM over the window followed, at every
//! step, by a graph convolution over the window's adjacency.
//!
//! ```text
//! H^t = LSTM(x^t, H^{t-1})                        (one row per channel)
//! X^t = ReLU(A·H^t·W1 + H^{t-1}·W2)·W3
//! embeddings = [X^1 | X^2 | … | X^T]   (or the mean over t)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DynGraph;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingReduce {
    /// Concatenate the per-step outputs along time: `d = T·d_step`.
    #[default]
    Concat,
    /// Average the per-step outputs: `d = d_step`.
    Mean,
}

impl FromStr for EmbeddingReduce {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(EmbeddingReduce::Concat),
            "mean" => Ok(EmbeddingReduce::Mean),
            _ => Err(Error::Config(format!("embedding reduce must be concat or mean, got `{s}`"))),
        }
    }
}

impl fmt::Display for EmbeddingReduce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingReduce::Concat => "concat",
            EmbeddingReduce::Mean => "mean",
        })
    }
}

impl EmbeddingReduce {
    pub fn embedding_dim(self, window: usize, d_step: usize) -> usize {
        match self {
            EmbeddingReduce::Concat => window * d_step,
            EmbeddingReduce::Mean => d_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `1 × 4h`, gate order input, forget, cell, output.
    pub w_ih: Tensor,
    /// `h × 4h`
    pub w_hh: Tensor,
    /// `1 × 4h`
    pub bias: Tensor,
    /// `h × h`
    pub w1: Tensor,
    /// `h × h`
    pub w2: Tensor,
    /// `h × d_step`
    pub w3: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w_ih, self.w_hh, self.bias, self.w1, self.w2, self.w3]
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / (rows + cols) as f64).sqrt()).expect("valid std");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl EncoderParams {
    pub fn init(hidden: usize, d_step: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let u = Uniform::new(-k, k).expect("valid range");
        EncoderParams {
            w_ih: Tensor::from_fn(1, 4 * hidden, |_, _| u.sample(rng)),
            w_hh: Tensor::from_fn(hidden, 4 * hidden, |_, _| u.sample(rng)),
            bias: Tensor::zeros(&[1, 4 * hidden]),
            w1: xavier(hidden, hidden, rng),
            w2: xavier(hidden, hidden, rng),
            w3: xavier(hidden, d_step, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn d_step(&self) -> usize {
        self.w3.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            w_ih: tape.leaf(self.w_ih.clone()),
            w_hh: tape.leaf(self.w_hh.clone()),
            bias: tape.leaf(self.bias.clone()),
            w1: tape.leaf(self.w1.clone()),
            w2: tape.leaf(self.w2.clone()),
            w3: tape.leaf(self.w3.clone()),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            w_ih: tape.constant(self.w_ih.clone()),
            w_hh: tape.constant(self.w_hh.clone()),
            bias: tape.constant(self.bias.clone()),
            w1: tape.constant(self.w1.clone()),
            w2: tape.constant(self.w2.clone()),
            w3: tape.constant(self.w3.clone()),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("encoder.w_ih", &self.w_ih),
            ("encoder.w_hh", &self.w_hh),
            ("encoder.bias", &self.bias),
            ("encoder.w1", &self.w1),
            ("encoder.w2", &self.w2),
            ("encoder.w3", &self.w3),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("encoder.w_ih", &mut self.w_ih),
            ("encoder.w_hh", &mut self.w_hh),
            ("encoder.bias", &mut self.bias),
            ("encoder.w1", &mut self.w1),
            ("encoder.w2", &mut self.w2),
            ("encoder.w3", &mut self.w3),
        ]
    }
}

/// Encodes one window. `node_features` is `N × T`, `adjacency` is `N × N`;
/// the result is `N × d`.
pub fn encode_on(
    tape: &mut Tape,
    node_features: Var,
    adjacency: Var,
    p: &EncoderVars,
    reduce: EmbeddingReduce,
) -> Result<Var> {
    let (n, t_len) = {
        let s = tape.shape(node_features);
        (s[0], s[1])
    };
    if tape.shape(adjacency) != [n, n] {
        return Err(Error::shape("encode", tape.shape(adjacency), &[n, n]));
    }
    let h = tape.shape(p.w_hh)[0];

    let mut hidden = tape.constant(Tensor::zeros(&[n, h]));
    let mut cell = tape.constant(Tensor::zeros(&[n, h]));
    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = tape.slice_cols(node_features, t, t + 1)?;
        let from_x = tape.matmul(x_t, p.w_ih)?;
        let from_h = tape.matmul(hidden, p.w_hh)?;
        let pre = tape.add(from_x, from_h)?;
        let gates = tape.add(pre, p.bias)?;
        let gi = tape.slice_cols(gates, 0, h)?;
        let gf = tape.slice_cols(gates, h, 2 * h)?;
        let gg = tape.slice_cols(gates, 2 * h, 3 * h)?;
        let go = tape.slice_cols(gates, 3 * h, 4 * h)?;
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        let new_cell = tape.add(keep, write)?;
        let squashed = tape.tanh(new_cell);
        let new_hidden = tape.mul(o, squashed)?;

        let ah = tape.matmul(adjacency, new_hidden)?;
        let spatial = tape.matmul(ah, p.w1)?;
        let temporal = tape.matmul(hidden, p.w2)?;
        let mixed = tape.add(spatial, temporal)?;
        let act = tape.relu(mixed);
        steps.push(tape.matmul(act, p.w3)?);

        hidden = new_hidden;
        cell = new_cell;
    }
    match reduce {
        EmbeddingReduce::Concat => tape.concat_cols(&steps),
        EmbeddingReduce::Mean => {
            let mut acc = steps[0];
            for &s in &steps[1..] {
                acc = tape.add(acc, s)?;
            }
            Ok(tape.scale(acc, 1.0 / t_len as f64))
        }
    }
}

/// Evaluation-mode embeddings of one graph.
pub fn encode(graph: &DynGraph, params: &EncoderParams, reduce: EmbeddingReduce) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let x = tape.constant(graph.node_features.clone());
    let a = tape.constant(graph.adjacency.clone());
    let e = encode_on(&mut tape, x, a, &vars, reduce)?;
    Ok(tape.value(e).clone())
}

/// Embeddings of a batch of windows: `B × N × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings {
    pub per_window: Vec<Tensor>,
}

impl NodeEmbeddings {
    /// Channel `n`'s embedding in window `b`, the flow's condition vector.
    pub fn condition_vector(&self, b: usize, n: usize) -> Result<&[f64]> {
        let w = self.per_window.get(b).ok_or_else(|| {
            Error::Contract(format!("window {b} out of range for {} windows", self.per_window.len()))
        })?;
        if n >= w.rows() {
            return Err(Error::Contract(format!(
                "channel {n} out of range for {} channels",
                w.rows()
            )));
        }
        Ok(w.row(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, AttentionParams, KeyIndex};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(rng: &mut ChaCha8Rng, t: usize, n: usize) -> (DynGraph, AttentionParams, Tensor) {
        let params = AttentionParams::init(t, rng);
        let w = Tensor::from_fn(t, n, |_, _| rng.random_range(-1.0..1.0));
        (build_graph(&w, 0, &params, KeyIndex::J).unwrap(), params, w)
    }

    #[test]
    fn zero_window_zero_bias_gives_zero_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(6, 3, &mut rng);
        let g = DynGraph {
            window_start: 0,
            node_features: Tensor::zeros(&[4, 5]),
            adjacency: Tensor::full(&[4, 4], 0.25),
            embeddings: None,
        };
        let e = encode(&g, &p, EmbeddingReduce::Concat).unwrap();
        assert_eq!(e.shape(), &[4, 15]);
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_adjacency_decouples_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::init(5, 2, &mut rng);
        let feats = Tensor::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let mut other = feats.clone();
        for t in 0..6 {
            other.data_mut()[2 * 6 + t] += 0.7;
        }
        let enc = |f: &Tensor| {
            let g = DynGraph {
                window_start: 0,
                node_features: f.clone(),
                adjacency: Tensor::eye(3),
                embeddings: None,
            };
            encode(&g, &p, EmbeddingReduce::Concat).unwrap()
        };
        let (a, b) = (enc(&feats), enc(&other));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, attn, w) = graph(&mut rng, 6, 4);
        let p = EncoderParams::init(5, 2, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let wp = Tensor::from_fn(6, 4, |t, c| w.at(t, perm[c]));
        let gp = build_graph(&wp, 0, &attn, KeyIndex::J).unwrap();
        let (e, ep) = (
            encode(&g, &p, EmbeddingReduce::Concat).unwrap(),
            encode(&gp, &p, EmbeddingReduce::Concat).unwrap(),
        );
        for (i, &src) in perm.iter().enumerate() {
            for (x, y) in ep.row(i).iter().zip(e.row(src)) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn adjacency_perturbation_reaches_the_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, _, _) = graph(&mut rng, 5, 3);
        let p = EncoderParams::init(4, 2, &mut rng);
        let base = encode(&g, &p, EmbeddingReduce::Concat).unwrap();
        let mut bumped = g.clone();
        bumped.adjacency.data_mut()[3 + 1] += 0.05; // entry (1, 1)
        let e = encode(&bumped, &p, EmbeddingReduce::Concat).unwrap();
        assert_ne!(e.row(1), base.row(1));
        assert_eq!(e.row(0), base.row(0));
        assert_eq!(e.row(2), base.row(2));
    }

    #[test]
    fn deterministic_and_condition_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, _, _) = graph(&mut rng, 4, 3);
        let p = EncoderParams::init(4, 2, &mut rng);
        let a = encode(&g, &p, EmbeddingReduce::Concat).unwrap();
        let b = encode(&g, &p, EmbeddingReduce::Concat).unwrap();
        assert_eq!(a, b);
        let m = encode(&g, &p, EmbeddingReduce::Mean).unwrap();
        assert_eq!(m.shape(), &[3, 2]);

        let emb = NodeEmbeddings { per_window: vec![a.clone(), b] };
        for bi in 0..2 {
            for n in 0..3 {
                assert_eq!(emb.condition_vector(bi, n).unwrap().len(), 8);
            }
        }
        assert_eq!(emb.condition_vector(0, 1).unwrap(), emb.condition_vector(1, 1).unwrap());
        assert!(emb.condition_vector(2, 0).is_err());
        assert!(emb.condition_vector(0, 3).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, _, _) = graph(&mut rng, 3, 3);
        let p = EncoderParams::init(3, 2, &mut rng);
        let mut inputs: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        inputs[2] = Tensor::from_fn(1, 12, |_, _| rng.random_range(-0.3..0.3));
        inputs.push(g.node_features.clone());
        inputs.push(g.adjacency.clone());
        let weights = Tensor::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let report = crate::gradcheck::check(&inputs, |tape, v| {
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
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}

