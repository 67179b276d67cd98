use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signfusion::network::{argmax, softmax, Architecture, Batch, FusionModel, Modality, Pass};

fn tiny_arch() -> Architecture {
    Architecture {
        frames: 4,
        features: 12,
        image_side: 8,
        classes: 3,
        leap_units: vec![10, 8, 6],
        head_units: vec![12, 8],
        backbone_blocks: vec![vec![3], vec![4], vec![5]],
        backbone_features: 6,
    }
}

fn random_batch(arch: &Architecture, n: usize, rng: &mut ChaCha8Rng) -> (Batch, Vec<usize>) {
    let frames: Vec<Array2<f64>> = (0..n)
        .map(|_| Array2::from_shape_simple_fn((arch.frames, arch.features), || rng.random::<f64>()))
        .collect();
    let images: Vec<Array3<f64>> = (0..n)
        .map(|_| Array3::from_shape_simple_fn((arch.image_side, arch.image_side, 3), || rng.random::<f64>()))
        .collect();
    let targets = (0..n).map(|_| rng.random_range(0..arch.classes)).collect();
    let batch = Batch::stack(frames.iter().zip(&images), arch.frames, arch.features, arch.image_side).unwrap();
    (batch, targets)
}

fn objective(model: &FusionModel, batch: &Batch, targets: &[usize]) -> f64 {
    model.forward_batch(batch, Pass::Infer).unwrap().cross_entropy(targets) + model.l2_penalty()
}

/// Central differences on `probes` random coordinates, cycling through the
/// tensors so every layer is visited. Returns the worst relative error.
///
/// Parameters are first nudged off initialisation so that no unit sits
/// exactly on a ReLU kink (zero biases plus all-dead inputs would).
fn worst_relative_error(model: &mut FusionModel, batch: &Batch, targets: &[usize], probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.parameters_mut() {
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    model.touch();
    let cache = model.forward_batch(batch, Pass::Train(&mut rng)).unwrap();
    let grads = model.backward(&cache, targets).unwrap();
    let frozen = model.frozen_mask();
    let live: Vec<usize> = (0..grads.tensors.len()).filter(|&t| !frozen[t]).collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for k in 0..probes {
        let t = live[k % live.len()];
        let i = rng.random_range(0..grads.tensors[t].len());
        let original = model.parameters()[t][i];
        model.parameters_mut()[t][i] = original + h;
        let up = objective(model, batch, targets);
        model.parameters_mut()[t][i] = original - h;
        let down = objective(model, batch, targets);
        model.parameters_mut()[t][i] = original;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.tensors[t][i];
        let scale = analytic.abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_per_modality() {
    for (modality, freeze) in [
        (Modality::LeapOnly, false),
        (Modality::ImageOnly, false),
        (Modality::Fusion, true),
    ] {
        let mut model = FusionModel::new(tiny_arch(), modality, 0.0, 0.05, freeze, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (batch, targets) = random_batch(&model.arch, 3, &mut rng);
        let worst = worst_relative_error(&mut model, &batch, &targets, 60, 13);
        assert!(worst < 1e-4, "{modality}: worst relative error {worst:e}");
    }
}

#[test]
fn frozen_backbone_gets_no_update() {
    let mut model = FusionModel::new(tiny_arch(), Modality::Fusion, 0.2, 0.01, true, 1).unwrap();
    let before: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, targets) = random_batch(&model.arch, 4, &mut rng);
    let cache = model.forward_batch(&batch, Pass::Train(&mut rng)).unwrap();
    let grads = model.backward(&cache, &targets).unwrap();
    model.apply_gradients(&grads, 1e-2, 0.9, 1e-7).unwrap();
    let frozen = model.frozen_mask();
    assert!(frozen.iter().any(|&f| f));
    for (t, p) in model.parameters().iter().enumerate() {
        if frozen[t] {
            assert_eq!(p.to_vec(), before[t], "frozen tensor {t} moved");
        }
    }
}

#[test]
fn inference_is_dropout_free() {
    let model = FusionModel::new(tiny_arch(), Modality::Fusion, 0.5, 0.01, true, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (batch, _) = random_batch(&model.arch, 5, &mut rng);
    let a = model.forward_batch(&batch, Pass::Infer).unwrap();
    let b = model.forward_batch(&batch, Pass::Infer).unwrap();
    assert_eq!(a.probs(), b.probs());
    for row in a.probs().rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn training_passes_draw_fresh_masks() {
    let model = FusionModel::new(tiny_arch(), Modality::Fusion, 0.5, 0.01, true, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (batch, _) = random_batch(&model.arch, 5, &mut rng);
    let a = model.forward_batch(&batch, Pass::Train(&mut rng)).unwrap();
    let b = model.forward_batch(&batch, Pass::Train(&mut rng)).unwrap();
    assert_ne!(a.probs(), b.probs());
}

#[test]
fn unused_branch_is_ignored() {
    let arch = tiny_arch();
    let model = FusionModel::new(arch.clone(), Modality::LeapOnly, 0.0, 0.0, false, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (batch, _) = random_batch(&arch, 2, &mut rng);
    let mut scrambled = batch.clone();
    scrambled.images.mapv_inplace(|v| 1.0 - v);
    let a = model.forward_batch(&batch, Pass::Infer).unwrap();
    let b = model.forward_batch(&scrambled, Pass::Infer).unwrap();
    assert_eq!(a.probs(), b.probs());
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 2..20),
        shift in -500.0f64..500.0,
    ) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let p = softmax(&logits);
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_survives_positive_affine_maps(
        logits in prop::collection::vec(-10.0f64..10.0, 2..20),
        scale in 0.01f64..100.0,
        offset in -100.0f64..100.0,
    ) {
        let mapped: Vec<f64> = logits.iter().map(|v| scale * v + offset).collect();
        // Near-ties can swap under rounding; only assert on a clear winner.
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&softmax(&logits)), argmax(&softmax(&mapped)));
    }
}
