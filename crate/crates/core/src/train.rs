//! Joint training of the graph encoder and the flow.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{extract_windows, Normalization, SeriesDataset, Window};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::Quartiles;
use crate::model::{clip_grad_norm, forward_batch, Adam, Model};
use crate::score::{anomaly_score, score_windows};
use crate::tensor::{pairwise_sum, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over batches of `mean D_GA − L_f`.
    pub loss: f64,
    pub d_ga: f64,
    pub log_lik: f64,
    pub batches: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub loss_curve: Vec<EpochStats>,
    /// Scores of the training windows from the final evaluation pass.
    pub train_scores: Vec<f64>,
}

pub fn write_loss_curve(curve: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in curve {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Trains on `train_ds`. A dataset without normalization statistics is
/// normalized with statistics fitted on it first.
pub fn train(train_ds: &SeriesDataset, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (ds, norm) = match &train_ds.normalization {
        Some(n) => (train_ds.clone(), n.clone()),
        None => {
            let n = Normalization::fit(train_ds);
            (train_ds.normalized(&n)?, n)
        }
    };
    if ds.len() <= cfg.window {
        return Err(Error::Config(format!(
            "training series has {} rows; it must be longer than the window ({})",
            ds.len(),
            cfg.window
        )));
    }
    let windows = extract_windows(&ds, cfg.window, cfg.stride)?;
    if windows.len() < cfg.batch {
        return Err(Error::Config(format!(
            "only {} training windows for batch size {}; lower --batch or --stride",
            windows.len(),
            cfg.batch
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg, &mut rng)?;
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut losses, mut dgas, mut lls) = (Vec::new(), Vec::new(), Vec::new());
        for (bi, chunk) in order.chunks_exact(cfg.batch).enumerate() {
            let batch: Vec<&Window> = chunk.iter().map(|&k| &windows[k]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let out = forward_batch(&mut tape, &model, &vars, &batch, cfg, exec, Some(&mut rng))?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi + 1,
                    detail: format!("loss is {loss}"),
                });
            }
            let grads = tape.backward(out.loss)?;
            let mut g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get_or_zero(v)).collect();
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi + 1,
                    detail: "non-finite gradient".into(),
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut g, c);
            }
            adam.step(&mut model, &g)?;
            losses.push(loss);
            dgas.push(mean(&out.d_ga));
            lls.push(out.flow_term);
        }
        let stats = EpochStats {
            epoch,
            loss: mean(&losses),
            d_ga: mean(&dgas),
            log_lik: mean(&lls),
            batches: losses.len(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, D_GA {:.4}, L_f {:.4}",
            cfg.epochs,
            stats.loss,
            stats.d_ga,
            stats.log_lik
        );
        curve.push(stats);
    }

    let (terms, _) = score_windows(&model, cfg, &windows, exec)?;
    let train_scores: Vec<f64> = terms.iter().map(|&(d, nll)| anomaly_score(d, nll)).collect();
    if train_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            batch: 0,
            detail: "non-finite training score in the final pass".into(),
        });
    }
    let quartiles = Quartiles::of(&train_scores)?;
    let checkpoint = Checkpoint::new(cfg.clone(), ds.channel_names.clone(), norm, quartiles, &model);
    Ok(TrainOutcome {
        checkpoint,
        model,
        loss_curve: curve,
        train_scores,
    })
}
