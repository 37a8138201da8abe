use gaflow::checkpoint::Checkpoint;
use gaflow::config::TrainConfig;
use gaflow::data::{extract_windows, Normalization, SeriesDataset, Window};
use gaflow::model::{forward_batch, Model};
use gaflow::ot::Ablation;
use gaflow::score::{score, score_with_model};
use gaflow::synth::{synth_generate, AnomalyInterval, AnomalyKind, SynthSpec};
use gaflow::train::train;
use gaflow::{Error, Exec, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        window: 12,
        stride: 4,
        batch: 4,
        epochs: 4,
        hidden: 8,
        d_step: 3,
        flow_hidden: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn data(seed: u64) -> (SeriesDataset, SeriesDataset) {
    let spec = SynthSpec::new(3, 400, seed)
        .with_anomaly(AnomalyInterval::new(AnomalyKind::InterdependencyShift, 280, 320))
        .with_anomaly(AnomalyInterval::new(AnomalyKind::Spike, 350, 362));
    synth_generate(&spec).unwrap().split(0.6).unwrap()
}

#[test]
fn training_loss_decreases() {
    let (tr, _) = data(7);
    let cfg = TrainConfig { epochs: 15, ..small_cfg(7) };
    let out = train(&tr, &cfg, Exec::Parallel).unwrap();
    let first = out.loss_curve.first().unwrap().loss;
    let last = out.loss_curve.last().unwrap().loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(out.loss_curve.len(), 15);
    // 240 rows give 58 windows; the partial batch is dropped
    assert!(out.loss_curve.iter().all(|e| e.batches == 14));
}

#[test]
fn without_alignment_the_loss_is_the_negative_likelihood() {
    let (tr, _) = data(3);
    let norm = Normalization::fit(&tr);
    let ds = tr.normalized(&norm).unwrap();
    let windows = extract_windows(&ds, 12, 4).unwrap();
    let batch: Vec<&Window> = windows.iter().take(4).collect();
    for ablation in [Ablation::NoGa, Ablation::Full] {
        let cfg = TrainConfig { ablation, ..small_cfg(3) };
        let model = Model::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out = forward_batch::<ChaCha8Rng>(&mut tape, &model, &vars, &batch, &cfg, Exec::Sequential, None).unwrap();
        let loss = tape.value(out.loss).item();
        let ga = out.d_ga.iter().sum::<f64>() / out.d_ga.len() as f64;
        if ablation == Ablation::NoGa {
            assert!(out.d_ga.iter().all(|&d| d == 0.0));
            assert_eq!(loss, -out.flow_term);
        } else {
            assert!(ga > 0.0);
            assert!((loss - (ga - out.flow_term)).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_same_run() {
    let (tr, te) = data(11);
    let cfg = small_cfg(11);
    let a = train(&tr, &cfg, Exec::Parallel).unwrap();
    let b = train(&tr, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
    let other = train(&tr, &small_cfg(12), Exec::Parallel).unwrap();
    assert_ne!(a.loss_curve, other.loss_curve);
    assert_eq!(
        score(&te, &a.checkpoint, Exec::Parallel).unwrap(),
        score(&te, &b.checkpoint, Exec::Parallel).unwrap()
    );
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let (tr, te) = data(5);
    let cfg = small_cfg(5);
    let seq = train(&tr, &cfg, Exec::Sequential).unwrap();
    let par = train(&tr, &cfg, Exec::Parallel).unwrap();
    assert_eq!(seq.loss_curve, par.loss_curve);
    let rs = score(&te, &seq.checkpoint, Exec::Sequential).unwrap();
    let rp = score(&te, &par.checkpoint, Exec::Parallel).unwrap();
    assert_eq!(rs, rp);
}

#[test]
fn loaded_checkpoint_scores_like_the_trained_model() {
    let (tr, te) = data(9);
    let cfg = TrainConfig { ablation: Ablation::NoGwd, ..small_cfg(9) };
    let out = train(&tr, &cfg, Exec::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config.ablation, Ablation::NoGwd);

    let (direct, _) = score_with_model(&te, &out.checkpoint, &out.model, Exec::Parallel).unwrap();
    let reloaded = score(&te, &loaded, Exec::Parallel).unwrap();
    for (a, b) in direct.windows.iter().zip(&reloaded.windows) {
        assert!((a.score - b.score).abs() <= 1e-12);
        assert_eq!(a.predicted, b.predicted);
    }
    assert_eq!(direct.quartiles, reloaded.quartiles);
}

#[test]
fn unlabeled_data_has_no_auc() {
    let (tr, te) = data(2);
    let out = train(&tr, &small_cfg(2), Exec::Parallel).unwrap();
    let unlabeled = SeriesDataset::new(
        te.channel_names.clone(),
        te.values().to_vec(),
        vec![0; te.len()],
    )
    .unwrap();
    let report = score(&unlabeled, &out.checkpoint, Exec::Parallel).unwrap();
    assert_eq!(report.auc, None);
    assert!(matches!(report.require_auc(), Err(Error::UndefinedMetric(_))));
    let labeled = score(&te, &out.checkpoint, Exec::Parallel).unwrap();
    let auc = labeled.auc.unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn channel_mismatch_is_refused() {
    let (tr, _) = data(4);
    let out = train(&tr, &small_cfg(4), Exec::Parallel).unwrap();
    let (wide, _) = synth_generate(&SynthSpec::new(4, 200, 1)).unwrap().split(0.5).unwrap();
    assert!(matches!(score(&wide, &out.checkpoint, Exec::Parallel), Err(Error::Contract(_))));
}
