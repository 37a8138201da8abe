//! Trains and scores the desk-scale synthetic scenario for several seeds and
//! ablations, printing per-seed AUCs and their mean.
//!
//! cargo run --release --example desk_run -- [epochs] [seeds] [ablation,...] [key=value;...]

use std::time::Instant;

use gaflow::config::TrainConfig;
use gaflow::ot::Ablation;
use gaflow::score::score_with_model;
use gaflow::synth::{synth_generate, SynthSpec};
use gaflow::train::train;
use gaflow::Exec;

fn main() -> gaflow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(Ok(10), |s| s.parse()).expect("epochs must be an integer");
    let seeds: u64 = args.get(2).map_or(Ok(5), |s| s.parse()).expect("seeds must be an integer");
    let ablations: Vec<Ablation> = args
        .get(3)
        .map_or("full,no_ga", String::as_str)
        .split(',')
        .map(str::parse)
        .collect::<gaflow::Result<_>>()?;
    let overrides = args.get(4).map(|s| s.replace(';', "\n")).unwrap_or_default();

    for ablation in ablations {
        let mut aucs = Vec::new();
        for seed in 0..seeds {
            let t0 = Instant::now();
            let ds = synth_generate(&SynthSpec::desk(seed))?;
            let mut cfg = TrainConfig {
                epochs,
                seed,
                ablation,
                ..TrainConfig::default()
            };
            cfg.apply_kv(&overrides)?;
            let (tr, te) = ds.split(cfg.split)?;
            let out = train(&tr, &cfg, Exec::Parallel)?;
            let (report, _) = score_with_model(&te, &out.checkpoint, &out.model, Exec::Parallel)?;
            let auc = report.require_auc()?;
            println!("{ablation} seed {seed}: auc {auc:.4} ({:.1}s)", t0.elapsed().as_secs_f64());
            aucs.push(auc);
        }
        println!("{ablation}: mean auc {:.4}", aucs.iter().sum::<f64>() / aucs.len() as f64);
    }
    Ok(())
}
