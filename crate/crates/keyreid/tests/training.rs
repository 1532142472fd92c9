//! Training-loop behavior: determinism, checkpoint round-trips, resume
//! equivalence, step semantics, and single-batch overfitting.

use std::path::Path;

use keyreid::checkpoint;
use keyreid::config::RunConfig;
use keyreid::run::{fit, TrainingLog};
use keyreid::synth::{generate, SynthConfig};
use keyreid_core::data::Dataset;
use keyreid_core::model::KeyReIdModel;
use keyreid_core::rng::Prng;
use keyreid_core::train::{pk_sample, train_step, TrainState};

fn desk_dataset() -> Dataset {
    generate(&SynthConfig {
        num_ids: 4,
        cams: 2,
        tracklets_per_id_cam: 4,
        frames_per_tracklet: 6,
        h: 64,
        w: 32,
        seed: 5,
    })
    .unwrap()
}

fn desk_config(dataset: &Dataset) -> RunConfig {
    let mut config = RunConfig::default();
    config.train.epochs = 2;
    config.train.warmup_epochs = 1;
    config.train.p_ids = 4;
    config.train.k_instances = 2;
    config.train.steps_per_epoch = 2;
    config.train.eval_interval = 1;
    config.train.seed = 42;
    config
        .resolved_for(dataset.num_identities(), dataset.num_cameras())
        .unwrap()
}

fn fresh_state(config: &RunConfig) -> TrainState<f64> {
    let mut rng = Prng::seed_from_u64(config.train.seed);
    let model = KeyReIdModel::<f64>::init(config.model_config().unwrap(), &mut rng).unwrap();
    TrainState::new(model, config.train.clone(), config.loss, config.ablation).unwrap()
}

fn run_to_dir(config: &RunConfig, dataset: &Dataset, dir: &Path) -> Vec<u8> {
    let mut state = fresh_state(config);
    let mut log = TrainingLog::create(&dir.join("training_log.jsonl"), config).unwrap();
    fit(&mut state, dataset, config, dir, &mut log, true).unwrap();
    std::fs::read(dir.join("checkpoint_last.krcp")).unwrap()
}

#[test]
fn identical_seeds_give_bit_identical_checkpoints() {
    let dataset = desk_dataset();
    let config = desk_config(&dataset);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let bytes_a = run_to_dir(&config, &dataset, a.path());
    let bytes_b = run_to_dir(&config, &dataset, b.path());
    assert_eq!(bytes_a, bytes_b, "same-seed runs must be byte-identical");
}

#[test]
fn resume_matches_uninterrupted_run_bit_exactly() {
    let dataset = desk_dataset();
    let mut config = desk_config(&dataset);
    config.train.epochs = 4;

    // uninterrupted
    let full_dir = tempfile::tempdir().unwrap();
    let full_bytes = run_to_dir(&config, &dataset, full_dir.path());

    // stop after epoch 2, resume
    let part_dir = tempfile::tempdir().unwrap();
    let mut short = config.clone();
    short.train.epochs = 2;
    let mut state = fresh_state(&short);
    let mut log = TrainingLog::create(&part_dir.path().join("training_log.jsonl"), &short).unwrap();
    fit(&mut state, &dataset, &short, part_dir.path(), &mut log, true).unwrap();

    let loaded = checkpoint::load(&part_dir.path().join("checkpoint_last.krcp")).unwrap();
    assert_eq!(loaded.epoch, 2);
    let mut resumed = loaded.into_train_state::<f64>().unwrap();
    resumed.config.epochs = 4;
    let mut resumed_config = config.clone();
    resumed_config.train.epochs = 4;
    let mut log = TrainingLog::append(&part_dir.path().join("training_log.jsonl")).unwrap();
    fit(
        &mut resumed,
        &dataset,
        &resumed_config,
        part_dir.path(),
        &mut log,
        true,
    )
    .unwrap();
    let resumed_bytes = std::fs::read(part_dir.path().join("checkpoint_last.krcp")).unwrap();
    assert_eq!(full_bytes, resumed_bytes, "resume must replay bit-exactly");
}

#[test]
fn checkpoint_state_round_trip() {
    let dataset = desk_dataset();
    let config = desk_config(&dataset);
    let dir = tempfile::tempdir().unwrap();
    let mut state = fresh_state(&config);
    let mut log = TrainingLog::create(&dir.path().join("log.jsonl"), &config).unwrap();
    fit(&mut state, &dataset, &config, dir.path(), &mut log, true).unwrap();

    let path = dir.path().join("checkpoint_last.krcp");
    let loaded = checkpoint::load(&path).unwrap();
    let restored = loaded.into_train_state::<f64>().unwrap();

    // identical tensors and rng; saving again must reproduce the bytes
    let again = dir.path().join("resaved.krcp");
    checkpoint::save(&restored, &config, &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn zero_lr_keeps_parameters_but_updates_centers() {
    let dataset = desk_dataset();
    let config = desk_config(&dataset);
    let mut state = fresh_state(&config);
    let batch = pk_sample(
        &dataset.train,
        state.config.p_ids,
        state.config.k_instances,
        4,
        &state.config.augment,
        &state.model.config.grouping,
        &mut state.rng,
    )
    .unwrap();
    let before = state.model.named_tensors();
    let centers_before = state.centers.global.values().to_vec();
    train_step(&mut state, &batch, 0.0).unwrap();
    let after = state.model.named_tensors();
    for ((name, _, a, kind), (_, _, b, _)) in before.iter().zip(&after) {
        if *kind == keyreid_core::params::ParamKind::Trainable {
            assert_eq!(a, b, "{name} changed under lr 0");
        }
    }
    assert_ne!(centers_before, state.centers.global.values());
}

#[test]
fn identical_state_and_batch_give_identical_deltas() {
    let dataset = desk_dataset();
    let config = desk_config(&dataset);
    let make_delta = || {
        let mut state = fresh_state(&config);
        let mut rng = Prng::seed_from_u64(7);
        let batch = pk_sample(
            &dataset.train,
            state.config.p_ids,
            state.config.k_instances,
            4,
            &state.config.augment,
            &state.model.config.grouping,
            &mut rng,
        )
        .unwrap();
        let bd = train_step(&mut state, &batch, 0.004).unwrap();
        (state.model.named_tensors(), bd)
    };
    let (t1, bd1) = make_delta();
    let (t2, bd2) = make_delta();
    assert_eq!(bd1, bd2);
    for ((n1, _, v1, _), (_, _, v2, _)) in t1.iter().zip(&t2) {
        assert_eq!(v1, v2, "{n1} differs between identical steps");
    }
}

#[test]
fn logged_total_recomposes_exactly() {
    let dataset = desk_dataset();
    let config = desk_config(&dataset);
    let mut state = fresh_state(&config);
    for _ in 0..3 {
        let batch = pk_sample(
            &dataset.train,
            state.config.p_ids,
            state.config.k_instances,
            4,
            &state.config.augment,
            &state.model.config.grouping,
            &mut state.rng,
        )
        .unwrap();
        let bd = train_step(&mut state, &batch, 0.002).unwrap();
        let alpha = state.weights.alpha;
        let recomposed = alpha * bd.global_total + (1.0 - alpha) * bd.local_total;
        assert!((bd.total - recomposed).abs() < 1e-12);
    }
}

#[test]
fn overfitting_a_single_batch_collapses_the_loss() {
    let dataset = desk_dataset();
    let mut config = desk_config(&dataset);
    config.train.p_ids = 4;
    config.train.k_instances = 2;
    let mut state = fresh_state(&config);
    let mut rng = Prng::seed_from_u64(3);
    let batch = pk_sample(
        &dataset.train,
        4,
        2,
        4,
        &keyreid_core::data::AugmentConfig {
            flip_probability: 0.0,
            erase_probability: 0.0,
        },
        &state.model.config.grouping,
        &mut rng,
    )
    .unwrap();
    let mut first = None;
    let mut last = f64::INFINITY;
    for step in 0..200 {
        let lr = 0.02 * (1.0 - step as f64 / 220.0);
        let bd = train_step(&mut state, &batch, lr).unwrap();
        if first.is_none() {
            first = Some(bd.total);
        }
        last = bd.total;
    }
    let first = first.unwrap();
    assert!(
        last < 0.15 * first,
        "loss should fall below 15% of its start: {first} -> {last}"
    );
}
