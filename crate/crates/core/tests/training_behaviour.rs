//! Training-loop contracts: reproducibility, resume, checkpoints, gradient routing
//! between branches and failure reporting.

use ndarray::Array3;

use sdseg::data::{BoundaryOp, SampleRecord};
use sdseg::losses::{total_loss_with_grads, LossWeights};
use sdseg::model::{backward, forward_train, init_weights, Ablation, Architecture, DecoderGrads, ModelConfig, NetworkOutput, OutputGrads};
use sdseg::synthetic::synth_records;
use sdseg::training::{
    sample_gradients, train_on_records, train_step, AdamState, Checkpoint, DatasetProfile, TrainConfig, TrainOptions,
    LOG_FILE,
};
use sdseg::weights::Weights;
use sdseg::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        encoder_channels: vec![2, 4, 6, 8, 12],
        embedding_dim: 4,
        use_skip_connections: true,
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::for_profile(DatasetProfile::SdpsegS).unwrap();
    c.name = "tiny".into();
    c.dataset_profile = DatasetProfile::Custom;
    c.model = tiny_model();
    c.epochs = epochs;
    c.lr_step_epochs = 2;
    c.lr0 = 1e-3;
    c.batch_size = 2;
    c.seed = 11;
    c
}

fn records(n: usize, offset: usize) -> Vec<SampleRecord> {
    synth_records(n, offset, 16, 5, BoundaryOp::Neighbor)
}

fn read(path: &std::path::Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn identical_configs_give_identical_logs() {
    let (train, val) = (records(5, 0), records(2, 100));
    let cfg = tiny_config(2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train_on_records(&cfg, &train, &val, a.path(), &TrainOptions::default()).unwrap();
    let rb = train_on_records(&cfg, &train, &val, b.path(), &TrainOptions::default()).unwrap();
    let log = read(&a.path().join(LOG_FILE));
    assert_eq!(log, read(&b.path().join(LOG_FILE)));
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 6);
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count(), 2);
    assert_eq!(ra.best.weights, rb.best.weights);
}

#[test]
fn resumed_run_matches_straight_run() {
    let (train, val) = (records(4, 0), records(2, 100));
    let cfg = tiny_config(3);
    let straight = tempfile::tempdir().unwrap();
    let s = train_on_records(&cfg, &train, &val, straight.path(), &TrainOptions::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = train_on_records(
        &cfg,
        &train,
        &val,
        split.path(),
        &TrainOptions {
            stop_after_epochs: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first.last_dir, split.path().join("ckpt-1"));
    // Simulate a crash after the checkpoint: junk at the end of the log is discarded.
    std::fs::write(
        split.path().join(LOG_FILE),
        read(&split.path().join(LOG_FILE)) + "{\"kind\":\"step\",\"partial\":true}\n",
    )
    .unwrap();
    let resumed = train_on_records(
        &cfg,
        &train,
        &val,
        split.path(),
        &TrainOptions {
            resume_from: Some(first.last_dir.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(read(&straight.path().join(LOG_FILE)), read(&split.path().join(LOG_FILE)));
    let last_s = Checkpoint::load(&s.last_dir).unwrap();
    let last_r = Checkpoint::load(&resumed.last_dir).unwrap();
    assert_eq!(last_s.weights, last_r.weights);
    assert_eq!(last_s.optimizer, last_r.optimizer);
    assert!(!split.path().join("ckpt-1").exists(), "superseded checkpoints are pruned");
}

#[test]
fn resume_rejects_a_different_config() {
    let (train, val) = (records(2, 0), Vec::new());
    let cfg = tiny_config(2);
    let dir = tempfile::tempdir().unwrap();
    let out = train_on_records(
        &cfg,
        &train,
        &val,
        dir.path(),
        &TrainOptions {
            stop_after_epochs: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let mut other = cfg.clone();
    other.lr0 = 5e-4;
    let err = train_on_records(
        &other,
        &train,
        &val,
        dir.path(),
        &TrainOptions {
            resume_from: Some(out.last_dir),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (train, val) = (records(2, 0), records(1, 100));
    let dir = tempfile::tempdir().unwrap();
    let out = train_on_records(&tiny_config(1), &train, &val, dir.path(), &TrainOptions::default()).unwrap();
    let copy = tempfile::tempdir().unwrap();
    out.best.save(copy.path()).unwrap();
    let back = Checkpoint::load(copy.path()).unwrap();
    assert_eq!(back, out.best);
    let bits = |w: &Weights<f32>| -> Vec<u32> { w.iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect() };
    assert_eq!(bits(&back.weights), bits(&out.best.weights));
    for f in ["weights.sdw", "adam_m.sdw", "adam_v.sdw"] {
        assert_eq!(std::fs::read(dir.path().join("best").join(f)).unwrap(), std::fs::read(copy.path().join(f)).unwrap());
    }
}

#[test]
fn best_checkpoint_tracks_validation_plaque_dice() {
    let (train, val) = (records(4, 0), records(2, 100));
    let dir = tempfile::tempdir().unwrap();
    let out = train_on_records(&tiny_config(3), &train, &val, dir.path(), &TrainOptions::default()).unwrap();
    let epochs: Vec<serde_json::Value> = read(&dir.path().join(LOG_FILE))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|v: &serde_json::Value| v["kind"] == "epoch")
        .collect();
    let scores: Vec<f64> = epochs.iter().map(|e| e["dice_plaque"].as_f64().unwrap()).collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first_best = scores.iter().position(|&s| s == best).unwrap();
    assert_eq!(out.best.meta.epoch, first_best + 1);
    assert_eq!(out.best.meta.best_val_dice_plaque, Some(best));
}

fn zero_like(g: &DecoderGrads<f64>) -> DecoderGrads<f64> {
    DecoderGrads {
        mask_logits: Array3::zeros(g.mask_logits.raw_dim()),
        boundary_logits: g.boundary_logits.as_ref().map(|b| Array3::zeros(b.raw_dim())),
        embeddings: g.embeddings.as_ref().map(|e| ndarray::Array2::zeros(e.raw_dim())),
        detach_embeddings: false,
    }
}

fn full_setup() -> (Architecture, Weights<f64>, SampleRecord) {
    let arch = Architecture::new(tiny_model(), Ablation::full()).unwrap();
    let mut w = init_weights::<f64>(&arch, 3);
    // Positive projection biases keep the narrow heads out of the all-zero ReLU regime.
    for (name, t) in w.iter_mut() {
        if name.contains(".proj.") && name.ends_with(".bias") {
            t.fill(0.1);
        }
    }
    (arch, w, records(1, 7).pop().unwrap())
}

#[test]
fn teeth_losses_never_reach_plaque_parameters() {
    let (arch, w, rec) = full_setup();
    let img = rec.image.mapv(f64::from);
    let (out, trace) = forward_train(&arch, &w, img.view()).unwrap();
    let NetworkOutput::Decomposed(r) = out else { panic!() };
    let loss = total_loss_with_grads(&r, &rec.supervision, &LossWeights::default(), true, false).unwrap();
    let grads = backward(
        &arch,
        &w,
        &trace,
        &OutputGrads::Decomposed {
            plaque: zero_like(&loss.plaque),
            teeth: loss.teeth,
        },
    )
    .unwrap();
    let mut teeth_nonzero = false;
    for (name, g) in grads.iter() {
        if name.starts_with("plaque.") {
            assert!(g.iter().all(|&v| v == 0.0), "{name} received teeth gradient");
        }
        if name.starts_with("teeth.") || name.starts_with("encoder.") {
            teeth_nonzero |= g.iter().any(|&v| v != 0.0);
        }
    }
    assert!(teeth_nonzero);
}

#[test]
fn projection_gradients_vanish_without_ccm() {
    let (arch, w, rec) = full_setup();
    let img = rec.image.mapv(f64::from);
    let (out, trace) = forward_train(&arch, &w, img.view()).unwrap();
    let NetworkOutput::Decomposed(r) = out else { panic!() };
    let loss = total_loss_with_grads(&r, &rec.supervision, &LossWeights::default(), true, false).unwrap();
    assert_eq!(loss.breakdown.ccm, 0.0);
    let grads = backward(&arch, &w, &trace, &OutputGrads::Decomposed { teeth: loss.teeth, plaque: loss.plaque }).unwrap();
    let proj: Vec<_> = grads.iter().filter(|(n, _)| n.contains(".proj.")).collect();
    assert!(!proj.is_empty());
    assert!(proj.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));

    let no_ccm = Architecture::new(tiny_model(), Ablation::of(&[sdseg::model::Component::SD, sdseg::model::Component::SCM])).unwrap();
    let w2 = init_weights::<f64>(&no_ccm, 3);
    let (_, g2) = sample_gradients(&no_ccm, &w2, &rec, &LossWeights::default()).unwrap();
    assert!(g2.names().all(|n| !n.contains(".proj.")));
}

#[test]
fn stop_gradient_confines_ccm_to_projection_heads() {
    let (arch, w, rec) = full_setup();
    let detached = LossWeights {
        ccm_stop_grad: true,
        ..Default::default()
    };
    let (l_full, g_detached) = sample_gradients(&arch, &w, &rec, &detached).unwrap();
    assert!(l_full.ccm != 0.0);
    let img = rec.image.mapv(f64::from);
    let (out, trace) = forward_train(&arch, &w, img.view()).unwrap();
    let NetworkOutput::Decomposed(r) = out else { panic!() };
    let no_ccm = total_loss_with_grads(&r, &rec.supervision, &detached, true, false).unwrap();
    let g_plain = backward(&arch, &w, &trace, &OutputGrads::Decomposed { teeth: no_ccm.teeth, plaque: no_ccm.plaque }).unwrap();
    for (name, g) in g_detached.iter() {
        if !name.contains(".proj.") {
            assert_eq!(g, g_plain.get(name).unwrap(), "{name}");
        }
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let cfg = tiny_config(1);
    let arch = cfg.architecture().unwrap();
    let mut w = init_weights::<f32>(&arch, 1);
    let before = w.clone();
    let mut st = AdamState::new(&w);
    train_step(&arch, &mut w, &mut st, &records(2, 0), &cfg, 0.0).unwrap();
    assert_eq!(w, before);
    assert_eq!(st.step, 1);
}

#[test]
fn unordered_reduction_agrees_with_ordered() {
    let mut cfg = tiny_config(1);
    let arch = cfg.architecture().unwrap();
    let batch = records(4, 0);
    let w = init_weights::<f32>(&arch, 2);
    let (la, ga) = sdseg::training::batch_gradients(&arch, &w, &batch, &cfg.loss_weights, true).unwrap();
    cfg.deterministic = false;
    let (lb, gb) = sdseg::training::batch_gradients(&arch, &w, &batch, &cfg.loss_weights, false).unwrap();
    assert!((la.total - lb.total).abs() < 1e-9);
    for (name, a) in ga.iter() {
        let b = gb.get(name).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-3), "{name}");
        }
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let cfg = tiny_config(1);
    let arch = cfg.architecture().unwrap();
    let mut w = init_weights::<f32>(&arch, 1);
    w.get_mut("plaque.mask_head.bias").unwrap().fill(f32::NAN);
    let mut st = AdamState::new(&w);
    let err = train_step(&arch, &mut w, &mut st, &records(1, 0), &cfg, 1e-3).unwrap_err();
    match &err {
        Error::NonFinite { term } => assert!(term.contains("plaque"), "{term}"),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn baseline_trains() {
    let mut cfg = tiny_config(1);
    cfg.ablation = Ablation::baseline();
    let dir = tempfile::tempdir().unwrap();
    let out = train_on_records(&cfg, &records(2, 0), &records(1, 50), dir.path(), &TrainOptions::default()).unwrap();
    let l = out.last_loss.unwrap();
    assert!(l.seg_joint > 0.0 && l.seg_teeth == 0.0 && l.total == l.seg_joint);
}
