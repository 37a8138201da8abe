//! The full network (attention graph, encoder, flow), its optimizer and the
//! per-batch forward pass shared by training and scoring.

use rand::Rng;

use crate::config::TrainConfig;
use crate::data::Window;
use crate::encoder::{encode_on, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::flow::{log_prob_on, FlowModel, FlowVars};
use crate::graph::{build_graph_on, AttentionParams, AttentionVars, DynGraph, LogitDropout};
use crate::ot::{batch_alignment, to_array, to_tensor, GaResult, GraphValues, OmegaMode};
use crate::tensor::{pairwise_sum, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub attention: AttentionParams,
    pub encoder: EncoderParams,
    pub flow: FlowModel,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub attention: AttentionVars,
    pub encoder: EncoderVars,
    pub flow: FlowVars,
}

impl ModelVars {
    /// Same order as [`Model::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.attention.all();
        v.extend(self.encoder.all());
        v.extend(self.flow.all());
        v
    }
}

impl Model {
    pub fn init(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let attention = AttentionParams::init(cfg.window, rng);
        let encoder = EncoderParams::init(cfg.hidden, cfg.d_step, rng);
        let flow = FlowModel::new(cfg.window, cfg.embedding_dim(), cfg.flow_hidden, cfg.flow_depth, rng)?;
        Ok(Model {
            attention,
            encoder,
            flow,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.attention.named().into_iter().map(|(k, t)| (k.to_string(), t)).collect();
        out.extend(self.encoder.named().into_iter().map(|(k, t)| (k.to_string(), t)));
        out.extend(self.flow.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .attention
            .named_mut()
            .into_iter()
            .map(|(k, t)| (k.to_string(), t))
            .collect();
        out.extend(self.encoder.named_mut().into_iter().map(|(k, t)| (k.to_string(), t)));
        out.extend(self.flow.named_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            attention: self.attention.bind(tape),
            encoder: self.encoder.bind(tape),
            flow: self.flow.bind(tape),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            attention: AttentionVars {
                w_q: tape.constant(self.attention.w_q.clone()),
                w_k: tape.constant(self.attention.w_k.clone()),
            },
            encoder: self.encoder.bind_constant(tape),
            flow: self.flow.bind_constant(tape),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `grads` follow the order of [`Model::named`].
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor]) -> Result<()> {
        let mut params = model.named_mut();
        if grads.len() != params.len() {
            return Err(Error::shape("adam", &[grads.len()], &[params.len()]));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales the gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Everything one batch produces.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `mean_b D_GA − L_f`, a scalar on the tape.
    pub loss: Var,
    /// Per-window `λ·(WD + GWD)`, zero under `no_ga`.
    pub d_ga: Vec<f64>,
    /// Per-window `WD + GWD`, zero under `no_ga`.
    pub d_ga_raw: Vec<f64>,
    /// Per-window mean over channels of the flow log-likelihood.
    pub log_lik: Vec<f64>,
    /// `L_f`, the mean log-likelihood over all `B·N` rows.
    pub flow_term: f64,
    pub graphs: Vec<DynGraph>,
    pub alignments: Vec<GaResult>,
}

/// Runs one batch through the network. `dropout` is only passed in
/// training; the alignment solves use `exec`.
pub fn forward_batch<R: Rng>(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    windows: &[&Window],
    cfg: &TrainConfig,
    exec: Exec,
    mut dropout: Option<&mut R>,
) -> Result<BatchForward> {
    let b = windows.len();
    if b < 2 {
        return Err(Error::Contract(format!("a batch needs at least 2 windows, got {b}")));
    }
    let n = windows[0].data.cols();
    let mut nodes = Vec::with_capacity(b);
    let mut adjs = Vec::with_capacity(b);
    let mut embs = Vec::with_capacity(b);
    for w in windows {
        if w.data.shape() != [cfg.window, n] {
            return Err(Error::shape("forward_batch", w.data.shape(), &[cfg.window, n]));
        }
        let x = tape.constant(w.data.clone());
        let drop = dropout.as_deref_mut().map(|rng| LogitDropout {
            rate: cfg.dropout,
            rng,
        });
        let g = build_graph_on(tape, x, &vars.attention, cfg.attention_key_index, drop)?;
        let e = encode_on(tape, g.node_features, g.adjacency, &vars.encoder, cfg.embedding_reduce)?;
        nodes.push(g.node_features);
        adjs.push(g.adjacency);
        embs.push(e);
    }

    let all_x = tape.concat_rows(&nodes)?;
    let all_c = tape.concat_rows(&embs)?;
    let lp = log_prob_on(tape, &model.flow, &vars.flow, all_x, all_c)?;
    let flow_term = tape.mean(lp);
    let lp_values = tape.value(lp).data().to_vec();
    let log_lik: Vec<f64> = lp_values.chunks(n).map(|c| pairwise_sum(c) / n as f64).collect();

    let graphs: Vec<DynGraph> = (0..b)
        .map(|k| DynGraph {
            window_start: windows[k].start,
            node_features: tape.value(nodes[k]).clone(),
            adjacency: tape.value(adjs[k]).clone(),
            embeddings: Some(tape.value(embs[k]).clone()),
        })
        .collect();

    let ablation = cfg.ablation;
    let (loss, d_ga, d_ga_raw, alignments) = if ablation.use_wd() || ablation.use_gwd() {
        let values: Vec<GraphValues> = graphs
            .iter()
            .map(|g| GraphValues {
                embeddings: to_array(g.embeddings.as_ref().expect("just encoded")),
                adjacency: to_array(&g.adjacency),
            })
            .collect();
        let settings = cfg.align_settings();
        let aligned = batch_alignment(&values, cfg.lambda, cfg.beta, cfg.omega_mode, &settings, exec)?;

        let (emb_sum, adj_sum) = match cfg.omega_mode {
            OmegaMode::Mean => {
                let mut es = embs[0];
                let mut as_ = adjs[0];
                for k in 1..b {
                    es = tape.add(es, embs[k])?;
                    as_ = tape.add(as_, adjs[k])?;
                }
                (Some(es), Some(as_))
            }
            OmegaMode::Concat => (None, None),
        };
        let mut terms = Vec::with_capacity(b);
        for (k, ga) in aligned.iter().enumerate() {
            let (ref_emb, ref_adj) = match cfg.omega_mode {
                OmegaMode::Mean => {
                    let scale = 1.0 / (b - 1) as f64;
                    let e = tape.sub(emb_sum.expect("mean mode"), embs[k])?;
                    let a = tape.sub(adj_sum.expect("mean mode"), adjs[k])?;
                    (tape.scale(e, scale), tape.scale(a, scale))
                }
                OmegaMode::Concat => {
                    let other_e: Vec<Var> = (0..b).filter(|&j| j != k).map(|j| embs[j]).collect();
                    let other_a: Vec<Var> = (0..b).filter(|&j| j != k).map(|j| adjs[j]).collect();
                    (tape.concat_rows(&other_e)?, tape.block_diag(&other_a)?)
                }
            };
            let mut parts = Vec::new();
            if let Some(p) = &ga.wd {
                parts.push(tape.transport(embs[k], ref_emb, &to_tensor(&p.plan))?);
            }
            if let Some(p) = &ga.gwd {
                parts.push(tape.gromov_transport(adjs[k], ref_adj, &to_tensor(&p.plan), cfg.edge_loss)?);
            }
            let mut t = parts[0];
            for &p in &parts[1..] {
                t = tape.add(t, p)?;
            }
            terms.push(tape.scale(t, cfg.lambda));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let mean_ga = tape.scale(total, 1.0 / b as f64);
        let loss = tape.sub(mean_ga, flow_term)?;
        let d_ga = aligned.iter().map(|g| g.d_ga).collect();
        let raw = aligned.iter().map(|g| g.raw()).collect();
        (loss, d_ga, raw, aligned)
    } else {
        let loss = tape.scale(flow_term, -1.0);
        (loss, vec![0.0; b], vec![0.0; b], Vec::new())
    };

    Ok(BatchForward {
        loss,
        d_ga,
        d_ga_raw,
        log_lik,
        flow_term: tape.value(flow_term).item(),
        graphs,
        alignments,
    })
}
