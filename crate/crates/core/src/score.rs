//! Window scores, the report written by `score`/`eval`, and its exports.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ScoreGrouping, TrainConfig};
use crate::data::{extract_windows, SeriesDataset, Window};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::DynGraph;
use crate::metrics::{auc_roc, Confusion, Quartiles};
use crate::model::{forward_batch, Model};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window_start: usize,
    pub label: u8,
    pub d_ga: f64,
    pub nll: f64,
    pub score: f64,
    pub predicted: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub windows: Vec<WindowScore>,
    pub quartiles: Quartiles,
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub auc: Option<f64>,
    pub threshold: f64,
    pub q1: f64,
    pub q3: f64,
    pub windows: usize,
    pub labeled_anomalous: usize,
    pub predicted_anomalous: usize,
    pub counts: Confusion,
}

impl ScoreReport {
    pub fn scores(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.score).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.windows.iter().map(|w| w.label).collect()
    }

    pub fn threshold(&self) -> f64 {
        self.quartiles.threshold
    }

    /// The AUC, or an error saying why it is undefined.
    pub fn require_auc(&self) -> Result<f64> {
        auc_roc(&self.scores(), &self.labels())
    }

    pub fn summary(&self) -> ScoreSummary {
        ScoreSummary {
            auc: self.auc,
            threshold: self.quartiles.threshold,
            q1: self.quartiles.q1,
            q3: self.quartiles.q3,
            windows: self.windows.len(),
            labeled_anomalous: self.windows.iter().filter(|w| w.label == 1).count(),
            predicted_anomalous: self.windows.iter().filter(|w| w.predicted == 1).count(),
            counts: self.confusion,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for row in &self.windows {
            w.serialize(row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.summary())
            .map_err(|e| Error::Contract(format!("summary serialization: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `S_b = D_GA + NLL`: large alignment distance and low likelihood both
/// push a window toward anomalous.
pub fn anomaly_score(d_ga: f64, nll: f64) -> f64 {
    d_ga + nll
}

pub fn read_score_csv(path: impl AsRef<Path>) -> Result<Vec<WindowScore>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|x| x.map_err(|e| Error::csv(path, e))).collect()
}

/// Index groups used as alignment batches when scoring `count` windows.
/// Every group has at least two members.
pub fn score_groups(count: usize, batch: usize, grouping: ScoreGrouping) -> Result<Vec<Vec<usize>>> {
    if count < 2 {
        return Err(Error::Contract(format!(
            "scoring needs at least 2 windows to build a reference graph, got {count}"
        )));
    }
    if batch < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch}")));
    }
    Ok(match grouping {
        ScoreGrouping::Interleaved => {
            let g = (count / batch).max(1);
            (0..g).map(|r| (r..count).step_by(g).collect()).collect()
        }
        ScoreGrouping::Consecutive => {
            let mut groups: Vec<Vec<usize>> = (0..count)
                .collect::<Vec<_>>()
                .chunks(batch)
                .map(|c| c.to_vec())
                .collect();
            if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
                let tail = groups.pop().expect("non-empty");
                groups.last_mut().expect("non-empty").extend(tail);
            }
            groups
        }
    })
}

/// Per-window `(d_ga, nll)` and the evaluation-mode graphs, in window order.
#[allow(clippy::type_complexity)]
pub fn score_windows(
    model: &Model,
    cfg: &TrainConfig,
    windows: &[Window],
    exec: Exec,
) -> Result<(Vec<(f64, f64)>, Vec<DynGraph>)> {
    let groups = score_groups(windows.len(), cfg.batch, cfg.score_grouping)?;
    let per_group = exec.map(&groups, |idx| {
        let mut tape = Tape::new();
        let vars = model.bind_constant(&mut tape);
        let refs: Vec<&Window> = idx.iter().map(|&k| &windows[k]).collect();
        let inner = if exec.is_parallel() { Exec::Sequential } else { exec };
        forward_batch::<ChaCha8Rng>(&mut tape, model, &vars, &refs, cfg, inner, None)
    });
    let mut terms = vec![(0.0, 0.0); windows.len()];
    let mut graphs: Vec<Option<DynGraph>> = vec![None; windows.len()];
    for (idx, out) in groups.iter().zip(per_group) {
        let out = out?;
        for (pos, &k) in idx.iter().enumerate() {
            let d = if cfg.score_lambda_scaled { out.d_ga[pos] } else { out.d_ga_raw[pos] };
            terms[k] = (d, -out.log_lik[pos]);
            graphs[k] = Some(out.graphs[pos].clone());
        }
    }
    Ok((terms, graphs.into_iter().map(|g| g.expect("every window is grouped")).collect()))
}

/// Applies the checkpoint's normalization unless `ds` is already normalized
/// with the same statistics.
pub fn prepare_dataset(ds: &SeriesDataset, ckpt: &Checkpoint) -> Result<SeriesDataset> {
    if ds.n_channels() != ckpt.channel_names.len() {
        return Err(Error::Contract(format!(
            "data has {} channels but the checkpoint was trained on {}",
            ds.n_channels(),
            ckpt.channel_names.len()
        )));
    }
    match &ds.normalization {
        None => ds.normalized(&ckpt.normalization),
        Some(n) if *n == ckpt.normalization => Ok(ds.clone()),
        Some(_) => Err(Error::Contract(
            "data was normalized with statistics other than the checkpoint's".into(),
        )),
    }
}

pub fn score(ds: &SeriesDataset, ckpt: &Checkpoint, exec: Exec) -> Result<ScoreReport> {
    Ok(score_with_graphs(ds, ckpt, exec)?.0)
}

pub fn score_with_graphs(ds: &SeriesDataset, ckpt: &Checkpoint, exec: Exec) -> Result<(ScoreReport, Vec<DynGraph>)> {
    let model = ckpt.model()?;
    score_with_model(ds, ckpt, &model, exec)
}

/// Scores with an in-memory model that matches `ckpt`.
pub fn score_with_model(
    ds: &SeriesDataset,
    ckpt: &Checkpoint,
    model: &Model,
    exec: Exec,
) -> Result<(ScoreReport, Vec<DynGraph>)> {
    let cfg = &ckpt.config;
    let ds = prepare_dataset(ds, ckpt)?;
    let windows = extract_windows(&ds, cfg.window, cfg.stride)?;
    let (terms, graphs) = score_windows(model, cfg, &windows, exec)?;
    let threshold = ckpt.train_scores.threshold;
    let rows: Vec<WindowScore> = windows
        .iter()
        .zip(&terms)
        .map(|(w, &(d_ga, nll))| {
            let score = anomaly_score(d_ga, nll);
            WindowScore {
                window_start: w.start,
                label: w.label,
                d_ga,
                nll,
                score,
                predicted: u8::from(score > threshold),
            }
        })
        .collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let predicted: Vec<u8> = rows.iter().map(|r| r.predicted).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let auc = match auc_roc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let report = ScoreReport {
        confusion: Confusion::of(&predicted, &labels),
        windows: rows,
        quartiles: ckpt.train_scores,
        auc,
    };
    Ok((report, graphs))
}
