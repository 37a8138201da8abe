//! Run configuration and its flat `key = value` text form.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingReduce;
use crate::error::{Error, Result};
use crate::graph::KeyIndex;
use crate::ot::{Ablation, AlignSettings, OmegaMode};
use crate::tensor::EdgeLoss;

/// How scoring windows are grouped into alignment batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreGrouping {
    /// Window `k` joins group `k mod G`, so every reference graph is drawn
    /// from across the whole series.
    #[default]
    Interleaved,
    /// Runs of `batch` chronologically adjacent windows.
    Consecutive,
}

impl FromStr for ScoreGrouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(ScoreGrouping::Interleaved),
            "consecutive" => Ok(ScoreGrouping::Consecutive),
            _ => Err(Error::Config(format!(
                "score grouping must be interleaved or consecutive, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for ScoreGrouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreGrouping::Interleaved => "interleaved",
            ScoreGrouping::Consecutive => "consecutive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub window: usize,
    pub stride: usize,
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub beta: f64,
    pub dropout: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub omega_mode: OmegaMode,
    pub attention_key_index: KeyIndex,
    pub hidden: usize,
    pub d_step: usize,
    pub embedding_reduce: EmbeddingReduce,
    pub flow_depth: usize,
    pub flow_hidden: usize,
    pub edge_loss: EdgeLoss,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    /// Newton polishing steps after Sinkhorn stops short of its tolerance.
    pub sinkhorn_newton_steps: usize,
    pub gw_outer_iter: usize,
    pub gw_tol: f64,
    pub grad_clip: Option<f64>,
    pub score_lambda_scaled: bool,
    pub score_grouping: ScoreGrouping,
    pub split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 40,
            stride: 10,
            batch: 16,
            epochs: 60,
            learning_rate: 0.002,
            lambda: 0.1,
            beta: 0.05,
            dropout: 0.2,
            seed: 0,
            ablation: Ablation::Full,
            omega_mode: OmegaMode::Mean,
            attention_key_index: KeyIndex::J,
            hidden: 32,
            d_step: 8,
            embedding_reduce: EmbeddingReduce::Concat,
            flow_depth: 2,
            flow_hidden: 64,
            edge_loss: EdgeLoss::Absolute,
            sinkhorn_max_iter: 200,
            sinkhorn_tol: 1e-7,
            sinkhorn_newton_steps: 0,
            gw_outer_iter: 20,
            gw_tol: 1e-7,
            grad_clip: None,
            score_lambda_scaled: false,
            score_grouping: ScoreGrouping::Interleaved,
            split: crate::data::DEFAULT_SPLIT,
        }
    }
}

/// Field names in the order they are written by [`TrainConfig::to_kv`].
pub const KEYS: &[&str] = &[
    "window",
    "stride",
    "batch",
    "epochs",
    "learning_rate",
    "lambda",
    "beta",
    "dropout",
    "seed",
    "ablation",
    "omega_mode",
    "attention_key_index",
    "hidden",
    "d_step",
    "embedding_reduce",
    "flow_depth",
    "flow_hidden",
    "edge_loss",
    "sinkhorn_max_iter",
    "sinkhorn_tol",
    "sinkhorn_newton_steps",
    "gw_outer_iter",
    "gw_tol",
    "grad_clip",
    "score_lambda_scaled",
    "score_grouping",
    "split",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Full-scale settings: batch 256 and window 60.
    pub fn full_scale() -> Self {
        TrainConfig {
            window: 60,
            batch: 256,
            ..TrainConfig::default()
        }
    }

    pub fn align_settings(&self) -> AlignSettings {
        AlignSettings {
            sinkhorn_max_iter: self.sinkhorn_max_iter,
            sinkhorn_tol: self.sinkhorn_tol,
            sinkhorn_newton_steps: self.sinkhorn_newton_steps,
            gw_outer_iter: self.gw_outer_iter,
            gw_tol: self.gw_tol,
            edge_loss: self.edge_loss,
            ablation: self.ablation,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_reduce.embedding_dim(self.window, self.d_step)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("stride", self.stride),
            ("epochs", self.epochs),
            ("hidden", self.hidden),
            ("d_step", self.d_step),
            ("flow_depth", self.flow_depth),
            ("flow_hidden", self.flow_hidden),
            ("sinkhorn_max_iter", self.sinkhorn_max_iter),
            ("gw_outer_iter", self.gw_outer_iter),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.batch < 2 {
            return Err(Error::Config(format!("`batch` must be at least 2, got {}", self.batch)));
        }
        let check = |k: &str, ok: bool, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("`{k}` out of range: {v}")))
            }
        };
        check("learning_rate", self.learning_rate > 0.0 && self.learning_rate.is_finite(), self.learning_rate)?;
        check("lambda", self.lambda >= 0.0 && self.lambda.is_finite(), self.lambda)?;
        check("beta", self.beta > 0.0 && self.beta.is_finite(), self.beta)?;
        check("dropout", (0.0..1.0).contains(&self.dropout), self.dropout)?;
        check("sinkhorn_tol", self.sinkhorn_tol > 0.0, self.sinkhorn_tol)?;
        check("gw_tol", self.gw_tol > 0.0, self.gw_tol)?;
        check("split", self.split > 0.0 && self.split < 1.0, self.split)?;
        if let Some(c) = self.grad_clip {
            check("grad_clip", c > 0.0 && c.is_finite(), c)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "window" => self.window = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "omega_mode" => self.omega_mode = v.parse()?,
            "attention_key_index" => self.attention_key_index = v.parse()?,
            "hidden" => self.hidden = parse(key, v)?,
            "d_step" => self.d_step = parse(key, v)?,
            "embedding_reduce" => self.embedding_reduce = v.parse()?,
            "flow_depth" => self.flow_depth = parse(key, v)?,
            "flow_hidden" => self.flow_hidden = parse(key, v)?,
            "edge_loss" => self.edge_loss = v.parse()?,
            "sinkhorn_max_iter" => self.sinkhorn_max_iter = parse(key, v)?,
            "sinkhorn_tol" => self.sinkhorn_tol = parse(key, v)?,
            "sinkhorn_newton_steps" => self.sinkhorn_newton_steps = parse(key, v)?,
            "gw_outer_iter" => self.gw_outer_iter = parse(key, v)?,
            "gw_tol" => self.gw_tol = parse(key, v)?,
            "grad_clip" => {
                self.grad_clip = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "score_lambda_scaled" => self.score_lambda_scaled = parse(key, v)?,
            "score_grouping" => self.score_grouping = v.parse()?,
            "split" => self.split = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "window" => self.window.to_string(),
            "stride" => self.stride.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lambda" => self.lambda.to_string(),
            "beta" => self.beta.to_string(),
            "dropout" => self.dropout.to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.to_string(),
            "omega_mode" => self.omega_mode.to_string(),
            "attention_key_index" => self.attention_key_index.to_string(),
            "hidden" => self.hidden.to_string(),
            "d_step" => self.d_step.to_string(),
            "embedding_reduce" => self.embedding_reduce.to_string(),
            "flow_depth" => self.flow_depth.to_string(),
            "flow_hidden" => self.flow_hidden.to_string(),
            "edge_loss" => self.edge_loss.to_string(),
            "sinkhorn_max_iter" => self.sinkhorn_max_iter.to_string(),
            "sinkhorn_tol" => self.sinkhorn_tol.to_string(),
            "sinkhorn_newton_steps" => self.sinkhorn_newton_steps.to_string(),
            "gw_outer_iter" => self.gw_outer_iter.to_string(),
            "gw_tol" => self.gw_tol.to_string(),
            "grad_clip" => self.grad_clip.map_or("none".to_string(), |c| c.to_string()),
            "score_lambda_scaled" => self.score_lambda_scaled.to_string(),
            "score_grouping" => self.score_grouping.to_string(),
            "split" => self.split.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv_file(base: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = base;
        cfg.apply_kv(&text)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::full_scale().validate().unwrap();
        assert_eq!(TrainConfig::default().embedding_dim(), 320);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("ablation", "no_gwd").unwrap();
        cfg.set("grad_clip", "5").unwrap();
        cfg.set("beta", "0.01").unwrap();
        let mut back = TrainConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn kv_errors_name_the_line() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply_kv("# comment\nwindow = 30\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert_eq!(cfg.window, 30);
        assert!(cfg.apply_kv("window 30").is_err());
        assert!(cfg.set("window", "-1").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        for (k, v) in [("batch", "1"), ("dropout", "1"), ("beta", "0"), ("split", "1.0"), ("window", "0")] {
            let mut cfg = TrainConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k}={v}");
        }
    }
}
