use super::*;
use crate::dataio::{generate_synthetic, simulate_partial_labels, Corpus, GenConfig, Interval, LabelDistribution};
use crate::evalkit::{evaluate, DEFAULT_THRESHOLDS};
use crate::losses::{Ablation, LossFlags};
use crate::model::{Checkpoint, ModelParams};
use crate::tensorcore::Tensor;
use std::path::Path;

fn tiny_corpus(n: usize, seed: u64) -> Corpus {
    let cfg = GenConfig {
        num_samples: n,
        frames: 24,
        tokens: 3,
        dim_video: 8,
        dim_query: 6,
        dim_sentence: 0,
        clusters: 3,
        min_event: 4,
        max_event: 12,
        noise: 0.3,
        seed,
        ..GenConfig::default()
    };
    let c = generate_synthetic(&cfg).unwrap();
    simulate_partial_labels(&c, LabelDistribution::Uniform, 0.0, seed).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        clusters_per_batch: 2,
        num_clusters: 3,
        model_dim: 8,
        hidden_dim: 8,
        epochs: 3,
        explicit_epochs: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn validation_rejects_bad_configs() {
    let mut c = TrainConfig::default();
    c.flags = LossFlags::default();
    c.flags.raml = false;
    c.flags.raun = false;
    c.flags.erml = false;
    c.flags.erun = false;
    assert!(c.validate().unwrap_err().to_string().contains("no loss enabled"));

    let c = TrainConfig { epochs: 0, ..TrainConfig::default() };
    assert!(c.validate().unwrap_err().to_string().contains("epochs must be at least 1"));

    let c = TrainConfig { batch_size: 10, ..TrainConfig::default() };
    assert!(c.validate().is_err());
    let c = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    assert!(c.validate().is_err());
    let c = TrainConfig { beta2: 1.0, ..TrainConfig::default() };
    assert!(c.validate().is_err());
    TrainConfig::default().validate().unwrap();
}

#[test]
fn config_toml_round_trip() {
    let c = TrainConfig {
        flags: Ablation::A3.flags(),
        seed: 11,
        learning_rate: 0.5e-3,
        ..TrainConfig::default()
    };
    let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);

    let partial = TrainConfig::from_toml("epochs = 7\n").unwrap();
    assert_eq!(partial.epochs, 7);
    assert_eq!(partial.batch_size, TrainConfig::default().batch_size);

    let err = TrainConfig::from_toml("epochz = 7\n").unwrap_err();
    assert!(err.to_string().contains("epochz"), "{err}");
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::vector(vec![4.0])];
    let before = clip_global_norm(&mut g, 1.0);
    assert!((before - 5.0).abs() < 1e-12);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    assert!((g[1].data()[0] - 0.8).abs() < 1e-12);

    let mut small = vec![Tensor::vector(vec![0.1])];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.1]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = crate::model::ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0, -1.0]));
    let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
    adam.update(&mut store, &[Tensor::vector(vec![2.0, -0.5])]);
    let w = store.get("w").unwrap().data();
    assert!((w[0] - 0.9).abs() < 1e-6);
    assert!((w[1] + 0.9).abs() < 1e-6);
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut store = crate::model::ParamStore::new();
    store.insert("w", Tensor::vector(vec![3.0]));
    let mut adam = Adam::new(&store, 0.05, 0.9, 0.999, 1e-8);
    for _ in 0..500 {
        let w = store.get("w").unwrap().data()[0];
        adam.update(&mut store, &[Tensor::vector(vec![2.0 * (w - 1.0)])]);
    }
    assert!((store.get("w").unwrap().data()[0] - 1.0).abs() < 1e-2);
}

#[test]
fn single_sample_overfits_containment() {
    let corpus = tiny_corpus(1, 3);
    let cfg = TrainConfig {
        epochs: 500,
        learning_rate: 5e-3,
        ..small_config()
    };
    let (model, log) = train_implicit(&corpus, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 500);
    let last = log.last().unwrap();
    let grnd = last.components.iter().find(|(n, _)| n == "grnd").unwrap().1;
    assert_eq!(grnd, 0.0, "grounding loss should reach zero");
    assert!(last.loss < log.epochs[0].loss);
    let q = pseudo_label_quality(&corpus, &export_pseudo_labels(&model, &corpus).unwrap()).unwrap();
    assert_eq!(q.containment, 1.0);
}

#[test]
fn explicit_overfits_one_sample() {
    let corpus = tiny_corpus(1, 5);
    let target = corpus.samples[0].gt.unwrap();
    let pseudo = vec![(corpus.samples[0].id.clone(), target)];
    let cfg = TrainConfig {
        explicit_epochs: 400,
        explicit_learning_rate: 1e-2,
        ..small_config()
    };
    let (params, log) = train_explicit(&corpus, &pseudo, &cfg).unwrap();
    let pred = params.infer(&corpus.samples[0]).unwrap();
    let r = evaluate(&[(corpus.samples[0].id.clone(), pred)], &pseudo, &DEFAULT_THRESHOLDS, "fit").unwrap();
    assert!(r.miou >= 95.0, "fit mIoU {} (pred {pred:?}, target {target:?})", r.miou);
    assert_eq!(log.epochs.len(), 400);
}

#[test]
fn untrained_export_is_valid_and_deterministic() {
    let corpus = tiny_corpus(12, 1);
    let cfg = small_config();
    let (model, _) = train_implicit(&corpus, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
    let a = export_pseudo_labels(&model, &corpus).unwrap();
    let b = export_pseudo_labels(&model, &corpus).unwrap();
    assert_eq!(a, b);
    for ((id, iv), s) in a.iter().zip(&corpus.samples) {
        assert_eq!(id, &s.id);
        assert!(iv.is_valid_within(s.frames() as f64), "{id}: {iv:?}");
        assert!(iv.len() >= 1.0 - 1e-12);
    }
}

#[test]
fn export_requires_labels() {
    let mut corpus = tiny_corpus(4, 2);
    let (model, _) = train_implicit(&corpus, &TrainConfig { epochs: 1, ..small_config() }).unwrap();
    corpus.samples[2].label = None;
    let err = export_pseudo_labels(&model, &corpus).unwrap_err();
    assert!(err.to_string().contains(&corpus.samples[2].id));
    assert!(train_implicit(&corpus, &small_config()).is_err());
}

#[test]
fn training_is_reproducible() {
    let corpus = tiny_corpus(16, 4);
    let cfg = small_config();
    let (a, la) = train_implicit(&corpus, &cfg).unwrap();
    let (b, lb) = train_implicit(&corpus, &cfg).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    let strip = |l: &TrainLog| l.epochs.iter().map(|e| (e.loss, e.pseudo_miou)).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
}

#[test]
fn logged_quality_matches_evalkit() {
    let corpus = tiny_corpus(16, 6);
    let (model, log) = train_implicit(&corpus, &small_config()).unwrap();
    let pseudo = export_pseudo_labels(&model, &corpus).unwrap();
    let gts: Vec<(String, Interval)> = corpus.samples.iter().map(|s| (s.id.clone(), s.gt.unwrap())).collect();
    let r = evaluate(&pseudo, &gts, &DEFAULT_THRESHOLDS, "pseudo").unwrap();
    assert_eq!(log.last().unwrap().pseudo_miou, Some(r.miou));
    let contained = corpus
        .samples
        .iter()
        .zip(&pseudo)
        .filter(|(s, (_, iv))| iv.contains(&s.label.unwrap().interval()))
        .count();
    assert_eq!(log.last().unwrap().containment, Some(contained as f64 / 16.0));
}

#[test]
fn diverging_run_reports_epoch_and_batch() {
    let corpus = tiny_corpus(16, 7);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        grad_clip: 1e300,
        ..small_config()
    };
    match train_implicit(&corpus, &cfg) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch < cfg.epochs),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoints_round_trip_for_both_stages() {
    let corpus = tiny_corpus(16, 8);
    let cfg = small_config();
    let (implicit, _) = train_implicit(&corpus, &cfg).unwrap();
    let bytes = implicit.to_checkpoint().to_bytes();
    let back = ModelParams::from_checkpoint(&Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap()).unwrap();
    assert_eq!(back, implicit);

    let pseudo = export_pseudo_labels(&implicit, &corpus).unwrap();
    let (explicit, _) = train_explicit(&corpus, &pseudo, &cfg).unwrap();
    let bytes = explicit.to_checkpoint().to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    let back = ExplicitParams::from_checkpoint(&ckpt).unwrap();
    assert_eq!(back, explicit);
    assert!(ExplicitParams::from_checkpoint(&implicit.to_checkpoint()).is_err());
    assert!(ModelParams::from_checkpoint(&ckpt).is_err());
}

#[test]
fn inference_ignores_labels_and_is_clamped() {
    let corpus = tiny_corpus(16, 9);
    let cfg = small_config();
    let pseudo: Vec<_> = corpus.samples.iter().map(|s| (s.id.clone(), s.gt.unwrap())).collect();
    let (explicit, _) = train_explicit(&corpus, &pseudo, &cfg).unwrap();
    for s in &corpus.samples {
        let a = explicit.infer(s).unwrap();
        let mut bare = s.clone();
        bare.label = None;
        bare.gt = None;
        let b = explicit.infer(&bare).unwrap();
        assert_eq!(a, b);
        assert!(a.is_valid_within(s.frames() as f64));
        assert!(a.len() >= 1.0 - 1e-12);
    }
}

#[test]
fn explicit_requires_a_label_per_sample() {
    let corpus = tiny_corpus(4, 10);
    let pseudo: Vec<_> = corpus.samples[1..].iter().map(|s| (s.id.clone(), s.gt.unwrap())).collect();
    let err = train_explicit(&corpus, &pseudo, &small_config()).unwrap_err();
    assert!(err.to_string().contains(&corpus.samples[0].id));
}

#[test]
fn log_jsonl_round_trip() {
    let corpus = tiny_corpus(16, 11);
    let (_, log) = train_implicit(&corpus, &small_config()).unwrap();
    let text = log.to_jsonl();
    assert_eq!(text.lines().count(), log.epochs.len());
    assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
    assert!(TrainLog::from_jsonl("{not json}\n").is_err());
}

#[test]
fn two_stage_rejects_overlapping_splits() {
    let corpus = generate_synthetic(&GenConfig {
        num_samples: 10,
        frames: 24,
        tokens: 3,
        dim_video: 8,
        dim_query: 6,
        clusters: 3,
        min_event: 4,
        max_event: 12,
        ..GenConfig::default()
    })
    .unwrap();
    let err = run_two_stage(&corpus, &corpus, &LabelConfig::default(), &small_config()).unwrap_err();
    assert!(err.to_string().contains("both"));
}

#[test]
fn two_stage_runs_end_to_end() {
    let gen = |n, offset| GenConfig {
        num_samples: n,
        frames: 24,
        tokens: 3,
        dim_video: 8,
        dim_query: 6,
        dim_sentence: 0,
        clusters: 3,
        min_event: 4,
        max_event: 12,
        noise: 0.3,
        id_offset: offset,
        ..GenConfig::default()
    };
    let train = generate_synthetic(&gen(16, 0)).unwrap();
    let test = generate_synthetic(&GenConfig { seed: 99, ..gen(6, 16) }).unwrap();
    let out = run_two_stage(&train, &test, &LabelConfig::default(), &small_config()).unwrap();
    assert_eq!(out.pseudo.len(), 16);
    assert_eq!(out.predictions.len(), 6);
    assert_eq!(out.report.n, 6);
    assert_eq!(out.report.tag, "test");
    assert_eq!(out.implicit_log.epochs.len(), 3);
    assert_eq!(out.explicit_log.epochs.len(), 3);
}
