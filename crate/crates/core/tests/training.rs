use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sphrot_core::geometry::{geodesic_degrees, uniform_rotation};
use sphrot_core::network::{NetConfig, RotationNet};
use sphrot_core::tensor::ParamStore;
use sphrot_core::training::{
    cosine_lr, evaluate, median, read_dataset, rng_stream, summarize, synth_dataset, train, write_csv, write_dataset,
    Sample, ShapeParams, TrainConfig,
};
use sphrot_core::Error;

fn small_shape() -> ShapeParams {
    ShapeParams { points: 512, ..Default::default() }
}

fn config(iterations: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig { iterations, batch_size, seed, eval_every: 0, net: NetConfig::micro(), ..Default::default() }
}

fn setup(cfg: &TrainConfig) -> (RotationNet, ParamStore<f64>) {
    RotationNet::new(cfg.net.clone(), &mut rng_stream(cfg.seed, "init")).unwrap()
}

fn snapshot<T: sphrot_core::tensor::Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    store.write_checkpoint("", &mut out).unwrap();
    out
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let samples = synth_dataset(3, 4, &small_shape()).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, ..config(1, 4, 0) };
    let (net, store) = setup(&cfg);
    let before = store.clone();
    let out = train(&cfg, &net, store, &samples, None, 1, |_| {}).unwrap();
    for id in before.ids() {
        let (a, b) = (before.tensor(id).data(), out.store.tensor(id).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", before.name(id));
    }
}

#[test]
fn schedule_halves_at_midpoint() {
    assert!((cosine_lr(1e-3, 500, 1000) - 5e-4).abs() < 1e-18);
    assert_eq!(cosine_lr(1e-3, 0, 1000), 1e-3);
}

// A fixed batch (the whole 4-sample set every iteration): the loss after
// 50 updates is below the initial loss for nearly every seed.
#[test]
fn fixed_batch_loss_decreases_across_seeds() {
    let mut decreased = 0;
    for seed in 0..50 {
        let samples = synth_dataset(1000 + seed, 4, &small_shape()).unwrap();
        let cfg = config(51, 4, seed);
        let (net, store) = setup(&cfg);
        let out = train(&cfg, &net, store.cast::<f32>(), &samples, None, 1, |_| {}).unwrap();
        if out.log[50].terms.loss < out.log[0].terms.loss {
            decreased += 1;
        }
    }
    assert!(decreased >= 45, "loss decreased in only {decreased}/50 seeds");
}

#[test]
fn training_is_thread_count_invariant_and_reproducible() {
    let samples = synth_dataset(5, 12, &small_shape()).unwrap();
    let held = synth_dataset(6, 5, &small_shape()).unwrap();
    let cfg = TrainConfig { eval_every: 2, ..config(4, 6, 9) };
    let run = |threads| {
        let (net, store) = setup(&cfg);
        let out = train(&cfg, &net, store.cast::<f32>(), &samples, Some(&held), threads, |_| {}).unwrap();
        let mut csv = Vec::new();
        write_csv(&out.log, &mut csv).unwrap();
        (snapshot(&out.store), csv)
    };
    let one = run(1);
    assert_eq!(one, run(1));
    assert_eq!(one, run(3));
    let csv = String::from_utf8(one.1).unwrap();
    assert_eq!(csv.lines().next(), Some("iter,loss,loss_vp,loss_ip,lr,median_deg"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn evaluation_is_thread_count_invariant() {
    let samples = synth_dataset(8, 9, &small_shape()).unwrap();
    let (net, store) = setup(&config(1, 1, 4));
    let a = evaluate(&net, &store, &samples, 1).unwrap();
    let b = evaluate(&net, &store, &samples, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_parameters_abort_with_batch_ids() {
    let samples = synth_dataset(2, 3, &small_shape()).unwrap();
    let cfg = config(2, 3, 0);
    let (net, mut store) = setup(&cfg);
    let id = store.ids().next().unwrap();
    store.tensor_mut(id).data_mut()[0] = f64::NAN;
    match train(&cfg, &net, store, &samples, None, 1, |_| {}) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("iteration 0"), "{msg}");
            assert!(msg.contains("batch sample ids"), "{msg}");
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn dataset_round_trips_through_directory() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_dataset(11, 3, &small_shape()).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (b, s) in back.iter().zip(&samples) {
        // rotations are written as shortest round-trip decimals, points as f32
        assert_eq!((b.id, b.gt_rotation), (s.id, s.gt_rotation));
        assert_eq!(b.cloud.streams.len(), s.cloud.streams.len());
        for (p, q) in b.cloud.points.iter().zip(&s.cloud.points) {
            assert!((0..3).all(|i| p[i] == q[i] as f32 as f64));
        }
    }
    // a second cycle is exact
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &back).unwrap();
    assert_eq!(read_dataset(again.path()).unwrap(), back);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(dir.path().join("000002.vipc").exists());
}

#[test]
fn malformed_manifest_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.txt"), "0 0 1 2 3\n").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
}

#[test]
fn dataset_generation_is_seeded() {
    let a = synth_dataset(21, 4, &small_shape()).unwrap();
    assert_eq!(a, synth_dataset(21, 4, &small_shape()).unwrap());
    assert_ne!(a[0].gt_rotation, synth_dataset(22, 4, &small_shape()).unwrap()[0].gt_rotation);
    // every sample is the template under its rotation
    let canonical = sphrot_core::training::template(&small_shape()).unwrap();
    for s in &a {
        let inv = s.gt_rotation.transpose();
        for (p, q) in s.cloud.points.iter().zip(&canonical.points) {
            let back = inv.apply(p);
            assert!((0..3).all(|i| (back[i] - q[i]).abs() < 1e-12));
        }
    }
}

#[test]
fn oracle_predictions_score_perfectly() {
    let samples: Vec<Sample> = synth_dataset(12, 20, &small_shape()).unwrap();
    let errors = samples.iter().map(|s| geodesic_degrees(&s.gt_rotation, &s.gt_rotation)).collect();
    let m = summarize(errors, None);
    assert!(m.median_deg < 1e-5 && m.mean_deg < 1e-5);
    assert_eq!((m.acc5, m.acc10, m.acc15), (1.0, 1.0, 1.0));
}

// An untrained network barely depends on its input, so its errors follow
// the distance between uniformly random rotation pairs.
#[test]
fn untrained_model_matches_random_rotation_baseline() {
    let samples = synth_dataset(13, 500, &small_shape()).unwrap();
    let (net, store) = setup(&config(1, 1, 2));
    let m = evaluate(&net, &store, &samples, 1).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pairs: Vec<f64> = (0..20_000)
        .map(|_| geodesic_degrees(&uniform_rotation(&mut rng), &uniform_rotation(&mut rng)))
        .collect();
    let oracle_mean = pairs.iter().sum::<f64>() / pairs.len() as f64;
    let oracle_median = median(&pairs);
    assert!((oracle_mean - 126.9).abs() < 1.5, "oracle mean {oracle_mean}");
    assert!((m.median_deg - oracle_median).abs() < 12.0, "model {} vs oracle {oracle_median}", m.median_deg);
    assert!((m.mean_deg - oracle_mean).abs() < 12.0, "model {} vs oracle {oracle_mean}", m.mean_deg);
}
