use std::time::Instant;

use hpcnn_core::data::{synthetic_dataset, LabeledImage};
use hpcnn_core::model::{build_tinycnn, ModelName};
use hpcnn_core::parallel::PerfConfig;
use hpcnn_core::train::{checkpoint_load, checkpoint_save, evaluate, train_epochs, OptimizerConfig, TrainConfig, TrainState};
use hpcnn_core::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blobs(n: usize, seed: u64) -> Vec<LabeledImage> {
    synthetic_dataset(10, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 32, seed, ..Default::default() }
}

#[test]
fn tinycnn_learns_blobs() {
    let train = blobs(640, 1);
    let test = blobs(200, 2);
    let t0 = Instant::now();
    let engine = Engine::sequential();
    let mut untrained = build_tinycnn(10, 3).unwrap();
    let before = evaluate(&mut untrained, &train, 64, &engine).unwrap().loss;
    let st = train_epochs(untrained, &train, &test, &cfg(3), &engine, 3).unwrap();
    let h = &st.history;
    eprintln!("{h:#?} in {:?}", t0.elapsed());
    assert!(h[0].train_loss < before, "{} vs untrained {before}", h[0].train_loss);
    assert!(h[2].train_acc > 0.8);
    assert!(t0.elapsed().as_secs() < 60);
    let sum: f64 = h.iter().map(|r| r.epoch_time_s()).sum();
    assert!((st.total_time_s() - sum).abs() <= 0.01 * sum);
}

#[test]
fn zero_lr_is_fixed_point() {
    let data = blobs(64, 4);
    let model = build_tinycnn(10, 5).unwrap();
    let before: Vec<_> = model.params().into_iter().cloned().collect();
    let mut c = cfg(5);
    c.optimizer.learning_rate = 0.0;
    let st = train_epochs(model, &data, &data, &c, &Engine::sequential(), 1).unwrap();
    let after: Vec<_> = st.model.params().into_iter().cloned().collect();
    assert_eq!(before, after);
}

#[test]
fn first_momentum_step_matches_plain_sgd() {
    let data = blobs(32, 6);
    let run = |m: f64| {
        let mut c = cfg(6);
        c.optimizer = OptimizerConfig { momentum: m, ..c.optimizer };
        c.max_batches = Some(1);
        let st = train_epochs(build_tinycnn(10, 6).unwrap(), &data, &data, &c, &Engine::sequential(), 1).unwrap();
        st.model.params().into_iter().cloned().collect::<Vec<_>>()
    };
    assert_eq!(run(0.0), run(0.9));
}

#[test]
fn same_seed_same_parameters() {
    let data = blobs(96, 7);
    let run = || train_epochs(build_tinycnn(10, 8).unwrap(), &data, &data, &cfg(8), &Engine::sequential(), 2).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.model.buffers(), b.model.buffers());
}

#[test]
fn thread_count_invariance() {
    let data = blobs(96, 9);
    let run = |threads| {
        let engine = Engine::new(&PerfConfig { num_threads: threads, ..PerfConfig::default() }).unwrap();
        train_epochs(build_tinycnn(10, 9).unwrap(), &data, &data, &cfg(9), &engine, 1).unwrap()
    };
    let base = run(1);
    for t in [2, 4] {
        let other = run(t);
        assert_eq!(base.model.params(), other.model.params(), "threads={t}");
        assert_eq!(base.model.buffers(), other.model.buffers(), "threads={t}");
    }
}

#[test]
fn resume_matches_uninterrupted() {
    let data = blobs(96, 10);
    let engine = Engine::sequential();
    let full = train_epochs(build_tinycnn(10, 11).unwrap(), &data, &data, &cfg(11), &engine, 2).unwrap();

    let half = train_epochs(build_tinycnn(10, 11).unwrap(), &data, &data, &cfg(11), &engine, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    checkpoint_save(&half, ModelName::Tinycnn, "h", &path).unwrap();
    let (mut resumed, _) = checkpoint_load(&path).unwrap();
    resumed.run_epochs(&data, &data, &cfg(11), &engine, 1).unwrap();
    assert_eq!(resumed.epoch, 2);
    assert_eq!(full.model.params(), resumed.model.params());
    assert_eq!(full.momentum, resumed.momentum);
}

#[test]
fn evaluation_counts() {
    let data = blobs(200, 12);
    let engine = Engine::sequential();
    let mut model = build_tinycnn(10, 13).unwrap();
    let ev = evaluate(&mut model, &data, 64, &engine).unwrap();
    assert_eq!(ev.confusion.total(), 200);

    // Zeroing every weight leaves only the (zero) head bias: constant logits.
    let mut flat = TrainState::new(build_tinycnn(10, 13).unwrap(), 0);
    for p in flat.model.params_mut() {
        p.data_mut().fill(0.0);
    }
    let ev = evaluate(&mut flat.model, &data, 64, &engine).unwrap();
    let nonzero_cols = (0..10).filter(|&c| (0..10).any(|a| ev.confusion.get(a, c) > 0)).count();
    assert_eq!(nonzero_cols, 1);
}

#[test]
fn untrained_models_sit_near_chance() {
    // Class labels are exchangeable under the i.i.d. head init, so the
    // expected accuracy is exactly 1/K; average seeds to tame the variance.
    let data = blobs(500, 14);
    let engine = Engine::sequential();
    let accs: Vec<f64> = (0..20)
        .map(|s| evaluate(&mut build_tinycnn(10, 100 + s).unwrap(), &data, 100, &engine).unwrap().accuracy())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "{accs:?}");
}
