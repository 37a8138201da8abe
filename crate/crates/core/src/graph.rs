//! Per-window dynamic graphs: channels are nodes and a self-attention matrix
//! over the channel series is the adjacency.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which node supplies the key in the attention logit `q_i · k_?`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyIndex {
    /// Standard self-attention, `q_i · k_j`.
    #[default]
    J,
    /// `q_i · k_i`: every row of the adjacency comes out uniform.
    I,
}

impl FromStr for KeyIndex {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "j" => Ok(KeyIndex::J),
            "i" => Ok(KeyIndex::I),
            _ => Err(Error::Config(format!("attention key index must be `j` or `i`, got `{s}`"))),
        }
    }
}

impl fmt::Display for KeyIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyIndex::J => "j",
            KeyIndex::I => "i",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `T × T`
    pub w_q: Tensor,
    /// `T × T`
    pub w_k: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
}

impl AttentionParams {
    pub fn init(window: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (window as f64).sqrt()).expect("valid std");
        let mut draw = || Tensor::from_fn(window, window, |_, _| normal.sample(rng));
        AttentionParams {
            w_q: draw(),
            w_k: draw(),
        }
    }

    pub fn window(&self) -> usize {
        self.w_q.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("attention.w_q", &self.w_q), ("attention.w_k", &self.w_k)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("attention.w_q", &mut self.w_q), ("attention.w_k", &mut self.w_k)]
    }
}

impl AttentionVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w_q, self.w_k]
    }
}

/// Node features and adjacency of one window, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    /// `N × T`
    pub node_features: Var,
    /// `N × N`
    pub adjacency: Var,
}

/// Dropout applied to the attention logits during training.
pub struct LogitDropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Builds the attention adjacency of a `T × N` window on the tape.
pub fn build_graph_on<R: Rng>(
    tape: &mut Tape,
    window: Var,
    params: &AttentionVars,
    key_index: KeyIndex,
    dropout: Option<LogitDropout<'_, R>>,
) -> Result<GraphVars> {
    let t_len = tape.shape(params.w_q)[0];
    let wshape = tape.shape(window).to_vec();
    if wshape.len() != 2 || wshape[0] != t_len {
        return Err(Error::shape("build_graph", &wshape, &[t_len, t_len]));
    }
    let n = wshape[1];
    let nodes = tape.transpose(window)?;
    let wq_t = tape.transpose(params.w_q)?;
    let wk_t = tape.transpose(params.w_k)?;
    let q = tape.matmul(nodes, wq_t)?;
    let k = tape.matmul(nodes, wk_t)?;
    let raw = match key_index {
        KeyIndex::J => {
            let kt = tape.transpose(k)?;
            tape.matmul(q, kt)?
        }
        KeyIndex::I => {
            let qk = tape.mul(q, k)?;
            let diag = tape.sum_rows(qk)?;
            let ones = tape.constant(Tensor::full(&[1, n], 1.0));
            tape.matmul(diag, ones)?
        }
    };
    let mut logits = tape.scale(raw, 1.0 / (t_len as f64).sqrt());
    if let Some(d) = dropout {
        if d.rate > 0.0 {
            let keep = 1.0 - d.rate;
            let mask = Tensor::from_fn(n, n, |_, _| {
                if d.rng.random_bool(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = tape.constant(mask);
            logits = tape.mul(logits, m)?;
        }
    }
    let adjacency = tape.softmax_rows(logits)?;
    Ok(GraphVars {
        node_features: nodes,
        adjacency,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynGraph {
    pub window_start: usize,
    /// `N × T`
    pub node_features: Tensor,
    /// `N × N`, row-stochastic.
    pub adjacency: Tensor,
    /// `N × d`, filled by the encoder.
    pub embeddings: Option<Tensor>,
}

/// Evaluation-mode graph of one `T × N` window.
pub fn build_graph(
    window: &Tensor,
    window_start: usize,
    params: &AttentionParams,
    key_index: KeyIndex,
) -> Result<DynGraph> {
    let mut tape = Tape::new();
    let vars = AttentionVars {
        w_q: tape.constant(params.w_q.clone()),
        w_k: tape.constant(params.w_k.clone()),
    };
    let w = tape.constant(window.clone());
    let g = build_graph_on::<rand::rngs::ThreadRng>(&mut tape, w, &vars, key_index, None)?;
    Ok(DynGraph {
        window_start,
        node_features: tape.value(g.node_features).clone(),
        adjacency: tape.value(g.adjacency).clone(),
        embeddings: None,
    })
}

/// Element-wise mean adjacency of a group of graphs.
pub fn mean_adjacency(graphs: &[&DynGraph]) -> Result<Tensor> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Contract("mean adjacency of an empty group".into()))?;
    let mut acc = Tensor::zeros(first.adjacency.shape());
    for g in graphs {
        if g.adjacency.shape() != acc.shape() {
            return Err(Error::shape("mean_adjacency", acc.shape(), g.adjacency.shape()));
        }
        for (a, x) in acc.data_mut().iter_mut().zip(g.adjacency.data()) {
            *a += x;
        }
    }
    Ok(acc.map(|a| a / graphs.len() as f64))
}

/// Mean element-wise absolute difference between the mean adjacencies of two
/// groups of windows.
pub fn adjacency_gap(a: &[&DynGraph], b: &[&DynGraph]) -> Result<f64> {
    let (ma, mb) = (mean_adjacency(a)?, mean_adjacency(b)?);
    if ma.shape() != mb.shape() {
        return Err(Error::shape("adjacency_gap", ma.shape(), mb.shape()));
    }
    let total: f64 = ma.data().iter().zip(mb.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / ma.len() as f64)
}

/// One adjacency entry as exported: `(window_start, i, j, a_ij)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyRecord {
    pub window_start: usize,
    pub i: usize,
    pub j: usize,
    pub a_ij: f64,
}

pub fn adjacency_export(graphs: &[DynGraph], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if graphs.is_empty() {
        return Err(Error::Contract("no graphs to export".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for g in graphs {
        let n = g.adjacency.rows();
        for i in 0..n {
            for j in 0..n {
                w.serialize(AdjacencyRecord {
                    window_start: g.window_start,
                    i,
                    j,
                    a_ij: g.adjacency.at(i, j),
                })
                .map_err(|e| Error::csv(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_adjacency_csv(path: impl AsRef<Path>) -> Result<Vec<AdjacencyRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::csv(path, e)))
        .collect()
}
