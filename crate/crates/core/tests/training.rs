mod common;

use std::io::Cursor;

use common::{expected_loss, field_scene, fixed_noise, gradient_errors, wall_scene};
use mtglab_core::losses::LossWeights;
use mtglab_core::metrics::{evaluate, non_traversable_rate, Generator};
use mtglab_core::model::{Mode, Model, ModelConfig, ModelKind};
use mtglab_core::trainer::{
    build_dataset, load_split, read_dataset, scene_seed, train, write_dataset, DatasetConfig, Split, StepRecord,
    TrainConfig,
};
use mtglab_core::Error;

fn tiny_train(kind: ModelKind, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(kind),
        epochs: steps,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn tiny_gradients_match_finite_differences_for_every_variant() {
    for kind in ModelKind::ALL {
        let cfg = ModelConfig::tiny(kind);
        let scene = wall_scene(&cfg);
        let model = Model::new(cfg.clone()).unwrap();
        let noise = fixed_noise(&cfg, 2);
        let errs = gradient_errors(&model, &[&scene, &scene], &noise, &LossWeights::default(), 1e-6);
        for (name, rel) in errs {
            assert!(rel < 1e-3, "{kind} {name}: relative error {rel}");
        }
    }
}

#[test]
fn overfitting_one_scene_cuts_the_loss_tenfold() {
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        latent_samples: 8,
        ..TrainConfig::default()
    };
    let scene = field_scene(&cfg.model, 20, 0.04);
    let before = expected_loss(&Model::new(cfg.model_config()).unwrap(), &scene, &cfg.weights);
    let out = train(&cfg, std::slice::from_ref(&scene), None, &mut std::io::sink()).unwrap();
    assert_eq!(out.log.len(), 200);
    let after = expected_loss(&out.model, &scene, &cfg.weights);
    assert!(after < 0.1 * before, "loss {before} -> {after}");
}

#[test]
fn logged_total_is_the_weighted_sum_of_terms() {
    let cfg = TrainConfig {
        weights: LossWeights {
            beta1: 0.3,
            beta2: 0.7,
            beta3: 2.0,
            endpoint: 0.5,
        },
        ..tiny_train(ModelKind::Mtg, 5, 1)
    };
    let scene = wall_scene(&cfg.model);
    let mut buf = Vec::new();
    let out = train(&cfg, &[scene.clone(), scene], None, &mut buf).unwrap();
    let w = cfg.weights;
    let lines: Vec<StepRecord> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, out.log);
    for r in &lines {
        let expect = w.beta1 * r.kl + w.beta2 * (r.coverage + r.diversity) + w.beta3 * r.traversability;
        assert!((r.total - expect).abs() < 1e-9, "{} vs {expect}", r.total);
    }
}

#[test]
fn same_seed_same_parameters() {
    let cfg = tiny_train(ModelKind::Mtg, 4, 7);
    let scene = wall_scene(&cfg.model);
    let scenes = vec![scene.clone(), scene.clone(), scene];
    let a = train(&cfg, &scenes, None, &mut std::io::sink()).unwrap();
    let b = train(&cfg, &scenes, None, &mut std::io::sink()).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log, b.log);
    let c = train(&TrainConfig { seed: 8, ..cfg }, &scenes, None, &mut std::io::sink()).unwrap();
    assert_ne!(a.model.params(), c.model.params());
}

#[test]
fn checkpoints_land_in_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(ModelKind::Dlow, 2, 0);
    let scene = wall_scene(&cfg.model);
    let out = train(&cfg, &[scene], Some(dir.path()), &mut std::io::sink()).unwrap();
    for f in ["checkpoint.ckpt", "model.ckpt"] {
        let m = Model::load(&dir.path().join(f)).unwrap();
        assert_eq!(m.params(), out.model.params());
    }
}

#[test]
fn max_steps_stops_early() {
    let cfg = TrainConfig {
        max_steps: Some(3),
        batch_size: 1,
        ..tiny_train(ModelKind::Cvae, 10, 0)
    };
    let scene = wall_scene(&cfg.model);
    let out = train(&cfg, &[scene.clone(), scene], None, &mut std::io::sink()).unwrap();
    assert_eq!(out.log.len(), 3);
}

#[test]
fn non_finite_observation_aborts_with_the_term() {
    let cfg = tiny_train(ModelKind::Mtg, 2, 0);
    let mut scene = wall_scene(&cfg.model);
    scene.observation.scans[0][0] = f64::NAN;
    match train(&cfg, &[scene], None, &mut std::io::sink()) {
        Err(Error::NonFinite { term, step }) => {
            assert_eq!(step, 0);
            assert!(!term.is_empty());
        }
        other => panic!("expected a non-finite abort, got {:?}", other.err()),
    }
}

#[test]
fn invalid_configs_are_usage_errors() {
    let scene = wall_scene(&ModelConfig::tiny(ModelKind::Mtg));
    for cfg in [
        TrainConfig {
            learning_rate: 0.0,
            ..tiny_train(ModelKind::Mtg, 1, 0)
        },
        TrainConfig {
            batch_size: 0,
            ..tiny_train(ModelKind::Mtg, 1, 0)
        },
        TrainConfig {
            adam_beta1: 1.0,
            ..tiny_train(ModelKind::Mtg, 1, 0)
        },
    ] {
        let r = train(&cfg, std::slice::from_ref(&scene), None, &mut std::io::sink());
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}

#[test]
fn training_raises_coverage_on_the_seen_scene() {
    let cfg = TrainConfig {
        epochs: 400,
        batch_size: 1,
        ..tiny_train(ModelKind::Mtg, 400, 3)
    };
    let scene = field_scene(&cfg.model, 20, 0.04);
    let scenes = [scene];
    let untrained = Model::new(cfg.model_config()).unwrap();
    let trained = train(&cfg, &scenes, None, &mut std::io::sink()).unwrap().model;
    let before = evaluate(&Generator::Model { model: &untrained, mode: Mode::Mean }, &scenes, 0).unwrap();
    let after = evaluate(&Generator::Model { model: &trained, mode: Mode::Mean }, &scenes, 0).unwrap();
    assert!(after.r_c > before.r_c + 0.1, "{} -> {}", before.r_c, after.r_c);
}

#[test]
fn evaluation_is_deterministic_and_oracle_is_perfect() {
    let cfg = ModelConfig::tiny(ModelKind::Mtg);
    let scenes = [wall_scene(&cfg)];
    let model = Model::new(cfg).unwrap();
    let gen = Generator::Model { model: &model, mode: Mode::Sample };
    let a = evaluate(&gen, &scenes, 5).unwrap();
    let b = evaluate(&gen, &scenes, 5).unwrap();
    assert_eq!((a.r_n, a.r_c, a.r_d), (b.r_n, b.r_c, b.r_d));
    let o = evaluate(&Generator::Oracle, &scenes, 5).unwrap();
    assert_eq!(o.r_n, 0.0);
    assert!((o.r_c - 1.0).abs() < 1e-12);
    assert!(matches!(evaluate(&gen, &[], 0), Err(Error::Usage(_))));
}

fn small_dataset(seed: u64) -> DatasetConfig {
    DatasetConfig {
        scenes: 10,
        seed,
        ..DatasetConfig::default()
    }
}

#[test]
fn datasets_are_reproducible_and_split() {
    let cfg = small_dataset(4);
    let a = build_dataset(&cfg, &mut |_| {}).unwrap();
    let b = build_dataset(&cfg, &mut |_| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
    assert_eq!(a.iter().filter(|r| r.split == Split::Train).count(), 8);
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &a).unwrap();
    let mut again = Vec::new();
    write_dataset(&mut again, &b).unwrap();
    assert_eq!(bytes, again);
    let back = read_dataset(Cursor::new(&bytes)).unwrap();
    assert_eq!(back, a);
    for split in [Split::Train, Split::Test] {
        for s in load_split(&back, split).unwrap() {
            let rate = non_traversable_rate(&s.ground_truth.trajectories, &s.grid, &s.pose).unwrap();
            assert_eq!(rate, 0.0);
        }
    }
}

#[test]
fn train_and_test_seeds_never_meet() {
    for base in [0, 1, 99] {
        for i in [0, 1, 1000, (1 << 31) - 1] {
            assert_ne!(scene_seed(base, Split::Train, i), scene_seed(base, Split::Test, i));
            assert_ne!(scene_seed(base, Split::Train, i), scene_seed(base + 1, Split::Train, i));
        }
    }
}

#[test]
fn dataset_errors() {
    let r = build_dataset(&DatasetConfig { scenes: 1, ..small_dataset(0) }, &mut |_| {});
    assert!(matches!(r, Err(Error::Usage(_))));
    let r = build_dataset(&DatasetConfig { train_fraction: 1.0, ..small_dataset(0) }, &mut |_| {});
    assert!(matches!(r, Err(Error::Usage(_))));
    assert!(matches!(read_dataset(Cursor::new("")), Err(Error::Dataset(_))));
    assert!(matches!(read_dataset(Cursor::new("{not json}\n")), Err(Error::Dataset(_))));
}
