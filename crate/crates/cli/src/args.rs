use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "gaflow",
    version,
    about = "Anomaly detection for multivariate time series by aligning learned dynamic graphs",
    subcommand_required = false,
    arg_required_else_help = true
)]
pub struct Cli {
    /// Replay the run recorded in a manifest file.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    /// Worker threads for the parallel regions (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Run every parallel region sequentially.
    #[arg(long, global = true)]
    pub sequential: bool,

    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest_out: Option<PathBuf>,

    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Score windows with a checkpoint; labels are optional.
    Score(ScoreArgs),
    /// Score windows and report AUC; needs both label classes.
    Eval(ScoreArgs),
    /// Run the solver and gradient property suites.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub channels: usize,
    #[arg(long, default_value_t = 2000)]
    pub length: usize,
    /// Interdependency shift over rows START:END (end exclusive). Repeatable.
    #[arg(long, value_name = "START:END")]
    pub shift: Vec<String>,
    /// Spike burst over rows START:END (end exclusive). Repeatable.
    #[arg(long, value_name = "START:END")]
    pub spike: Vec<String>,
    /// Required: generation is fully determined by the seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    /// Accept input without a label column (all rows labeled normal).
    #[arg(long)]
    pub unlabeled: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write.
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
    /// Per-epoch loss CSV (default: <out>.loss.csv).
    #[arg(long, value_name = "CSV")]
    pub loss_curve: Option<PathBuf>,
    /// Flat key = value file with config overrides.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from full-scale defaults (window 60, batch 256).
    #[arg(long)]
    pub full_scale: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    /// Rows after the checkpoint's training split.
    Test,
    /// Every row of the file.
    All,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "JSON")]
    pub checkpoint: PathBuf,
    /// Per-window score CSV.
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// JSON summary (default: <out>.summary.json).
    #[arg(long, value_name = "JSON")]
    pub summary: Option<PathBuf>,
    /// Also write every window's adjacency matrix as CSV.
    #[arg(long, value_name = "CSV")]
    pub export_graphs: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Instance count of the equivalence suite; the others scale with it.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    /// JSON report of every suite.
    #[arg(long, value_name = "JSON")]
    pub out: Option<PathBuf>,
    /// Deliberately break one check to confirm the suites can fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Every training option as a flag. Values are parsed by the same code as
/// config files, so both accept identical spellings.
#[derive(Debug, Default, Args)]
pub struct ConfigFlags {
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub stride: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    /// Weight of the alignment distance.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Entropic regularization of the transport solvers.
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// full | no_wd | no_gwd | no_ga
    #[arg(long)]
    pub ablation: Option<String>,
    /// mean | concat
    #[arg(long)]
    pub omega_mode: Option<String>,
    /// j | i
    #[arg(long)]
    pub attention_key_index: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub d_step: Option<String>,
    /// concat | mean
    #[arg(long)]
    pub embedding_reduce: Option<String>,
    #[arg(long)]
    pub flow_depth: Option<String>,
    #[arg(long)]
    pub flow_hidden: Option<String>,
    /// absolute | square
    #[arg(long)]
    pub edge_loss: Option<String>,
    #[arg(long)]
    pub sinkhorn_max_iter: Option<String>,
    #[arg(long)]
    pub sinkhorn_tol: Option<String>,
    #[arg(long)]
    pub sinkhorn_newton_steps: Option<String>,
    #[arg(long)]
    pub gw_outer_iter: Option<String>,
    #[arg(long)]
    pub gw_tol: Option<String>,
    /// Global gradient-norm cap, or `none`.
    #[arg(long)]
    pub grad_clip: Option<String>,
    #[arg(long)]
    pub score_lambda_scaled: Option<String>,
    /// interleaved | consecutive
    #[arg(long)]
    pub score_grouping: Option<String>,
    /// Fraction of rows used for training.
    #[arg(long)]
    pub split: Option<String>,
}

impl ConfigFlags {
    /// `(config key, value)` for every flag that was given, in key order.
    pub fn overrides(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("window", &self.window),
            ("stride", &self.stride),
            ("batch", &self.batch),
            ("epochs", &self.epochs),
            ("learning_rate", &self.learning_rate),
            ("lambda", &self.lambda),
            ("beta", &self.beta),
            ("dropout", &self.dropout),
            ("seed", &self.seed),
            ("ablation", &self.ablation),
            ("omega_mode", &self.omega_mode),
            ("attention_key_index", &self.attention_key_index),
            ("hidden", &self.hidden),
            ("d_step", &self.d_step),
            ("embedding_reduce", &self.embedding_reduce),
            ("flow_depth", &self.flow_depth),
            ("flow_hidden", &self.flow_hidden),
            ("edge_loss", &self.edge_loss),
            ("sinkhorn_max_iter", &self.sinkhorn_max_iter),
            ("sinkhorn_tol", &self.sinkhorn_tol),
            ("sinkhorn_newton_steps", &self.sinkhorn_newton_steps),
            ("gw_outer_iter", &self.gw_outer_iter),
            ("gw_tol", &self.gw_tol),
            ("grad_clip", &self.grad_clip),
            ("score_lambda_scaled", &self.score_lambda_scaled),
            ("score_grouping", &self.score_grouping),
            ("split", &self.split),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }
}
