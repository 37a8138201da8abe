//! `gaflow` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, file or
//! checkpoint error, 3 numeric failure, 4 oracle failure or replay mismatch.

mod args;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use gaflow::checkpoint::Checkpoint;
use gaflow::config::TrainConfig;
use gaflow::data::{read_csv, write_csv, SeriesDataset};
use gaflow::graph::adjacency_export;
use gaflow::oracle::{run_oracle, Fault, OracleOptions};
use gaflow::score::score_with_graphs;
use gaflow::synth::{synth_generate, AnomalyInterval, AnomalyKind, SynthSpec};
use gaflow::train::{train, write_loss_curve};
use gaflow::{Error, Exec};
use log::info;

use args::{Cli, Command, DataArgs, OracleArgs, Part, ScoreArgs, SynthArgs, TrainArgs};
use manifest::{sibling, Manifest};

/// Why a run stopped short of success.
#[derive(Debug)]
enum Failure {
    Lib(Error),
    /// Suites ran but at least one failed.
    Oracle,
    /// A replay produced outputs that differ from the recorded ones.
    Replay(Vec<PathBuf>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(e) => match e {
                Error::Config(_) => 1,
                Error::Parse { .. }
                | Error::Io { .. }
                | Error::Csv { .. }
                | Error::Contract(_)
                | Error::Checkpoint(_)
                | Error::UndefinedMetric(_) => 2,
                Error::Shape { .. } | Error::Domain { .. } | Error::Divergence { .. } => 3,
            },
            Failure::Oracle | Failure::Replay(_) => 4,
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

struct Ctx {
    exec: Exec,
    argv: Vec<String>,
    manifest_out: Option<PathBuf>,
}

impl Ctx {
    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, self.argv.clone(), self.exec.is_parallel())
    }

    fn save(&self, m: &Manifest, primary: &Path) -> Outcome<PathBuf> {
        let path = self
            .manifest_out
            .clone()
            .unwrap_or_else(|| sibling(primary, "manifest.json"));
        m.save(&path)?;
        info!("manifest written to {}", path.display());
        Ok(path)
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Oracle => eprintln!("error: oracle suites failed"),
                Failure::Replay(paths) => {
                    eprintln!("error: replay produced different outputs:");
                    for p in paths {
                        eprintln!("  {}", p.display());
                    }
                }
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Outcome {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };

    if let Some(path) = &cli.manifest {
        if cli.command.is_some() {
            return Err(Error::Config("--manifest replays a recorded run and takes no subcommand".into()).into());
        }
        return replay(path, exec, cli.manifest_out.clone());
    }
    let ctx = Ctx {
        exec,
        argv,
        manifest_out: cli.manifest_out.clone(),
    };
    match cli.command {
        Some(Command::Synth(a)) => synth(&ctx, &a),
        Some(Command::Train(a)) => train_cmd(&ctx, &a),
        Some(Command::Score(a)) => score_cmd(&ctx, &a, false),
        Some(Command::Eval(a)) => score_cmd(&ctx, &a, true),
        Some(Command::Oracle(a)) => oracle(&ctx, &a),
        None => Err(Error::Config("no subcommand given; see --help".into()).into()),
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> Outcome {
    if n == 0 {
        return Err(Error::Config("--threads must be positive".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")).into())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(n: usize) -> Outcome {
    if n != 1 {
        log::warn!("built without the `parallel` feature; ignoring --threads {n}");
    }
    Ok(())
}

/// Reruns the recorded command after checking its inputs, then compares
/// the new outputs with the recorded digests.
fn replay(path: &Path, exec: Exec, manifest_out: Option<PathBuf>) -> Outcome {
    let recorded = Manifest::load(path)?;
    recorded.verify_inputs()?;
    let mut full = vec!["gaflow".to_string()];
    full.extend(recorded.argv.iter().cloned());
    let cli = Cli::try_parse_from(&full)
        .map_err(|e| Error::Config(format!("recorded arguments no longer parse: {e}")))?;
    if cli.manifest.is_some() {
        return Err(Error::Config("a manifest cannot replay another replay".into()).into());
    }
    // the rerun writes its own manifest; keep the recorded one intact
    let fresh = manifest_out.unwrap_or_else(|| sibling(path, "replay.json"));
    let ctx = Ctx {
        exec: if cli.sequential { Exec::Sequential } else { exec },
        argv: recorded.argv.clone(),
        manifest_out: Some(fresh.clone()),
    };
    match cli.command {
        Some(Command::Synth(a)) => synth(&ctx, &a),
        Some(Command::Train(a)) => train_cmd(&ctx, &a),
        Some(Command::Score(a)) => score_cmd(&ctx, &a, false),
        Some(Command::Eval(a)) => score_cmd(&ctx, &a, true),
        Some(Command::Oracle(a)) => oracle(&ctx, &a),
        None => Err(Error::Config("manifest records no subcommand".into()).into()),
    }?;
    let rerun = Manifest::load(&fresh)?;
    let differing = rerun.differing_outputs(&recorded);
    if !differing.is_empty() {
        return Err(Failure::Replay(differing));
    }
    println!(
        "replay of `{}` reproduced {} output(s) byte for byte",
        recorded.command,
        rerun.outputs.len()
    );
    Ok(())
}

fn parse_intervals(kind: AnomalyKind, specs: &[String]) -> Outcome<Vec<AnomalyInterval>> {
    Ok(specs
        .iter()
        .map(|s| AnomalyInterval::parse(kind, s))
        .collect::<gaflow::Result<_>>()?)
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Outcome {
    let t0 = Instant::now();
    let seed = a.seed.ok_or_else(|| {
        Error::Config("synth needs --seed; generation is fully determined by it (e.g. --seed 7)".into())
    })?;
    let mut spec = SynthSpec::new(a.channels, a.length, seed);
    for iv in parse_intervals(AnomalyKind::InterdependencyShift, &a.shift)?
        .into_iter()
        .chain(parse_intervals(AnomalyKind::Spike, &a.spike)?)
    {
        spec = spec.with_anomaly(iv);
    }
    spec.validate().map_err(|e| match e {
        Error::Config(m) => {
            Error::Config(format!("{m}; intervals are START:END with END exclusive, e.g. --shift 1200:1320"))
        }
        other => other,
    })?;
    let ds = synth_generate(&spec)?;
    write_csv(&ds, &a.out)?;

    let mut m = ctx.manifest("synth");
    m.seed = Some(seed);
    m.output(&a.out)?;
    m.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    ctx.save(&m, &a.out)?;
    println!(
        "wrote {} rows x {} channels to {} ({} anomalous rows)",
        ds.len(),
        ds.n_channels(),
        a.out.display(),
        ds.labels().iter().filter(|&&l| l == 1).count()
    );
    Ok(())
}

fn load_data(d: &DataArgs) -> Outcome<SeriesDataset> {
    match read_csv(&d.data, Some(&d.label_column)) {
        Ok(ds) => Ok(ds),
        // without a label column every column is a channel
        Err(Error::Config(_)) if d.unlabeled => Ok(read_csv(&d.data, None)?),
        Err(e) => Err(e.into()),
    }
}

/// Defaults (or full-scale defaults), then the config file, then flags.
fn resolve_config(a: &TrainArgs) -> Outcome<TrainConfig> {
    let base = if a.full_scale {
        TrainConfig::full_scale()
    } else {
        TrainConfig::default()
    };
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_kv_file(base, p)?,
        None => base,
    };
    for (k, v) in a.flags.overrides() {
        cfg.set(k, v).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("--{}: {m}", k.replace('_', "-"))),
            other => other,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let t0 = Instant::now();
    let cfg = resolve_config(a)?;
    let ds = load_data(&a.data)?;
    let (tr, _) = ds.split(cfg.split)?;
    info!("training on rows 0..{} of {}", tr.len(), ds.len());
    let t_load = t0.elapsed().as_secs_f64();

    let out = train(&tr, &cfg, ctx.exec)?;
    let t_train = t0.elapsed().as_secs_f64() - t_load;
    out.checkpoint.save(&a.out)?;
    let curve = a.loss_curve.clone().unwrap_or_else(|| sibling(&a.out, "loss.csv"));
    write_loss_curve(&out.loss_curve, &curve)?;

    let mut m = ctx.manifest("train");
    m.seed = Some(cfg.seed);
    m.config = Some(cfg);
    m.input(&a.data.data)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.output(&curve)?;
    m.timings.insert("load".into(), t_load);
    m.timings.insert("train".into(), t_train);
    m.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    ctx.save(&m, &a.out)?;

    let last = out.loss_curve.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} rows: final loss {:.4}, threshold {:.4}; checkpoint {}",
        out.loss_curve.len(),
        tr.len(),
        last.loss,
        out.checkpoint.train_scores.threshold,
        a.out.display()
    );
    Ok(())
}

fn score_cmd(ctx: &Ctx, a: &ScoreArgs, require_auc: bool) -> Outcome {
    let t0 = Instant::now();
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let ds = match a.part {
        Part::All => ds,
        Part::Test => ds.split(ckpt.config.split)?.1,
    };
    let t_load = t0.elapsed().as_secs_f64();
    let (report, graphs) = score_with_graphs(&ds, &ckpt, ctx.exec)?;
    let auc = if require_auc {
        Some(report.require_auc().map_err(|e| match e {
            Error::UndefinedMetric(m) => {
                Error::UndefinedMetric(format!("{m}; use `gaflow score` for data without both classes"))
            }
            other => other,
        })?)
    } else {
        report.auc
    };
    let t_score = t0.elapsed().as_secs_f64() - t_load;

    report.write_csv(&a.out)?;
    let summary = a.summary.clone().unwrap_or_else(|| sibling(&a.out, "summary.json"));
    report.write_summary(&summary)?;
    if let Some(p) = &a.export_graphs {
        adjacency_export(&graphs, p)?;
    }

    let command = if require_auc { "eval" } else { "score" };
    let mut m = ctx.manifest(command);
    m.seed = Some(ckpt.config.seed);
    m.config = Some(ckpt.config.clone());
    m.input(&a.data.data)?;
    m.input(&a.checkpoint)?;
    m.output(&a.out)?;
    m.output(&summary)?;
    if let Some(p) = &a.export_graphs {
        m.output(p)?;
    }
    m.timings.insert("load".into(), t_load);
    m.timings.insert("score".into(), t_score);
    m.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    ctx.save(&m, &a.out)?;

    let s = report.summary();
    let auc = auc.map_or("undefined (single class)".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} windows, {} flagged above {:.4}; auc {auc}",
        s.windows, s.predicted_anomalous, s.threshold
    );
    Ok(())
}

fn oracle(ctx: &Ctx, a: &OracleArgs) -> Outcome {
    let t0 = Instant::now();
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()).into());
    }
    let opts = OracleOptions {
        seeds: a.seeds,
        fault: if a.inject_fault { Fault::Untransposed } else { Fault::None },
        exec: ctx.exec,
    };
    let report = run_oracle(&opts);
    print!("{report}");
    if let Some(p) = &a.out {
        let mut text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Contract(format!("report serialization: {e}")))?;
        text.push('\n');
        std::fs::write(p, text).map_err(|source| Error::Io { path: p.clone(), source })?;
    }

    let mut m = ctx.manifest("oracle");
    m.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    let primary = a.out.clone().unwrap_or_else(|| PathBuf::from("oracle"));
    ctx.save(&m, &primary)?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Oracle)
    }
}
