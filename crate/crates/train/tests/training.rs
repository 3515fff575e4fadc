use im2grid::model::{Im2Grid, Variant};
use im2grid_synth::make_blob_scene;
use im2grid::tensor::Tensor;
use im2grid_train::*;
use im2grid::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adam_three_steps_match_hand_recursion() {
    let (lr, wd) = (0.01f64, 0.1f64);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let grads = [0.5f64, -1.5, 0.25];
    let mut theta = 2.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut p = Tensor::scalar(theta);
    let mut state = OptimizerState::<f64>::new([p.shape()], lr, wd);
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        theta -= lr * (mhat / (vhat.sqrt() + eps) + wd * theta);
        adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut state).unwrap();
        assert!((p.item() - theta).abs() < 1e-7, "step {t}: {} vs {theta}", p.item());
    }
    assert_eq!(state.step, 3);
}

#[test]
fn flips_replay_from_the_seed() {
    let img = Tensor::<f32>::from_fn(&[1, 4, 4, 4], |i| (i[1] * 16 + i[2] * 4 + i[3]) as f32);
    let run = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..10).map(|_| augment_flip(&img, &img, &mut r).2).collect::<Vec<_>>()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
    assert_eq!(apply_flips(&img, &[false, false, false]), img);
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig { iterations, lr: 3e-3, lambda: 1e-3, levels: 2, ..Default::default() }
}

#[test]
fn zero_iterations_leave_the_initialization() {
    let mut source = SynthShift { shape: vec![16, 16], n_blobs: 3, max_shift: 2.0 };
    let cfg = TrainConfig { seed: 3, ..small_config(0) };
    let out = train(&mut source, &cfg).unwrap();
    assert_eq!(out.model, Im2Grid::new(cfg.model_config(2), 3).unwrap());
    assert!(out.losses.is_empty());
    assert_eq!(out.optimizer.step, 0);
}

#[test]
fn identical_pairs_have_nothing_to_learn() {
    let img = make_blob_scene::<f32>(9, &[16, 16], 4).image;
    let mut source = FixedPair { fixed: img.clone(), moving: img };
    let out = train(&mut source, &TrainConfig { iterations: 200, levels: 2, ..Default::default() }).unwrap();
    assert_eq!(out.losses.len(), 200);
    for r in &out.losses {
        assert!(r.total.abs() < 1e-6, "iteration {}: total {}", r.iter, r.total);
    }
}

#[test]
fn shift_training_reduces_similarity_loss_tenfold() {
    let shape = vec![32, 32];
    let mut source = SynthShift { shape: shape.clone(), n_blobs: 4, max_shift: 2.0 };
    let cfg = TrainConfig { iterations: 2000, lr: 3e-3, lambda: 1e-3, levels: 3, variant: Variant::Full, ..Default::default() };
    let out = train(&mut source, &cfg).unwrap();
    // A single training pair is a noisy yardstick, so the untrained (identity)
    // and trained similarity are compared on the same unseen pairs.
    let mut held_out = SynthShift { shape, n_blobs: 4, max_shift: 2.0 };
    let mut r = ChaCha8Rng::seed_from_u64(1234);
    let (mut before, mut after) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (f, m) = PairSource::<f32>::next_pair(&mut held_out, &mut r).unwrap();
        let warped = out.model.register(&f, &m).unwrap().warped;
        let mse = |a: &Tensor<f32>| a.data().iter().zip(f.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / f.numel() as f64;
        before += mse(&m);
        after += mse(&warped);
    }
    assert!(after < 0.1 * before, "trained {after:.5} vs untrained {before:.5}");
}

#[test]
fn tiny_weight_decay_is_negligible() {
    let run = |wd| {
        let mut source = SynthShift { shape: vec![16, 16], n_blobs: 3, max_shift: 1.5 };
        let cfg = TrainConfig { weight_decay: wd, ..small_config(100) };
        train(&mut source, &cfg).unwrap().model
    };
    let (a, b) = (run(0.0), run(1e-9));
    let norm = |m: &Im2Grid<f32>| m.named_tensors().iter().map(|(_, t)| (t.norm() as f64).powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .named_tensors()
        .iter()
        .zip(b.named_tensors())
        .map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    assert!(diff / norm(&a) < 1e-4, "relative difference {}", diff / norm(&a));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut source = SynthBlobs { shape: vec![16, 16], n_blobs: 4, amplitude: 1.0, frequency: 1.0 };
        let out = train(&mut source, &TrainConfig { seed: 7, ..small_config(15) }).unwrap();
        (format_loss_log(&out.losses), encode_entries(&checkpoint_entries(&out.model, &out.optimizer).unwrap()).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn nan_input_aborts_with_parameter_norms() {
    let mut img = make_blob_scene::<f32>(1, &[16, 16], 3).image;
    img.data_mut()[5] = f32::NAN;
    let mut source = FixedPair { fixed: img.clone(), moving: img };
    match train(&mut source, &small_config(3)) {
        Err(Error::Numerical(msg)) => {
            assert!(msg.contains("parameter norms"), "{msg}");
            assert!(msg.contains("encoder.l1.conv1.weight"), "{msg}");
        }
        other => panic!("expected a numerical abort, got {other:?}"),
    }
}

#[test]
fn outputs_land_in_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut source = SynthShift { shape: vec![16, 16], n_blobs: 3, max_shift: 1.0 };
    let cfg = TrainConfig { out_dir: Some(dir.path().to_path_buf()), checkpoint_every: 2, ..small_config(5) };
    let out = train(&mut source, &cfg).unwrap();
    let log = std::fs::read_to_string(dir.path().join("loss.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter\tsim\tsmooth\ttotal");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0\t"));
    for name in ["checkpoint.igck", "checkpoint_000002.igck", "checkpoint_000004.igck"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let (model, state) = load_checkpoint(&dir.path().join("checkpoint.igck")).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(state, out.optimizer);
}

fn trained_model(levels: usize, variant: Variant) -> (Im2Grid<f32>, OptimizerState<f32>) {
    let mut source = SynthShift { shape: vec![16, 16], n_blobs: 3, max_shift: 1.0 };
    let out = train(&mut source, &TrainConfig { levels, variant, ..small_config(4) }).unwrap();
    (out.model, out.optimizer)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (model, state) = trained_model(3, Variant::Full);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.igck");
    save_checkpoint(&path, &model, &state).unwrap();
    let (m2, s2) = load_checkpoint(&path).unwrap();
    for ((n, a), (_, b)) in model.named_tensors().iter().zip(m2.named_tensors()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{n} changed");
    }
    assert_eq!(m2.config, model.config);
    assert_eq!(s2, state);
}

#[test]
fn corrupted_magic_is_rejected_without_touching_the_model() {
    let (model, state) = trained_model(2, Variant::Lite);
    let mut bytes = encode_entries(&checkpoint_entries(&model, &state).unwrap()).unwrap();
    bytes[0] = b'X';
    assert!(matches!(decode_entries(&bytes), Err(Error::Format { offset: 0, .. })));

    let mut target = Im2Grid::new(model.config.clone(), 99).unwrap();
    let before = target.clone();
    let mut tstate = OptimizerState::for_model(&target, 1e-3, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.igck");
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint_into(&path, &mut target, &mut tstate).is_err());
    assert_eq!(target, before);
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let (model, state) = trained_model(2, Variant::Lite);
    let bytes = encode_entries(&checkpoint_entries(&model, &state).unwrap()).unwrap();
    for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_entries(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
    }
}

#[test]
fn level_count_mismatch_names_the_entry() {
    let (three, s3) = trained_model(3, Variant::Full);
    let entries = checkpoint_entries(&three, &s3).unwrap();
    let (mut two, mut s2) = trained_model(2, Variant::Full);
    let before = two.clone();
    match load_entries_into(&entries, &mut two, &mut s2) {
        Err(Error::EntryMismatch { name, .. }) => assert!(name.contains("l3"), "named {name}"),
        other => panic!("expected an entry mismatch, got {other:?}"),
    }
    assert_eq!(two, before);

    // the other direction: a 2-level checkpoint lacks the third level
    let entries = checkpoint_entries(&before, &s2).unwrap();
    let mut target = three.clone();
    let mut ts = s3.clone();
    match load_entries_into(&entries, &mut target, &mut ts) {
        Err(Error::EntryMismatch { name, msg }) => {
            assert!(name.contains("l3"), "named {name}");
            assert!(msg.contains("missing"), "{msg}");
        }
        other => panic!("expected an entry mismatch, got {other:?}"),
    }
}

#[test]
fn volume_directory_draws_distinct_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for k in 0..3 {
        let img = make_blob_scene::<f32>(r.gen(), &[16, 16], 3).image;
        im2grid_volume_io::write_image(&dir.path().join(format!("s{k}.vol")), &img).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let mut source = VolumeDir::<f32>::open(dir.path()).unwrap();
    assert_eq!(source.paths.len(), 3);
    let mut rr = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (a, b) = source.next_pair(&mut rr).unwrap();
        assert_ne!(a, b);
    }
}
