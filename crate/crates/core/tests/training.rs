use proptest::prelude::*;
use scibilic_core::phantom::{build_dataset, Dataset, PhantomSpec, Role, Sample};
use scibilic_core::train::{
    heteroscedastic_loss, sample_patches, train, validation_loss, TrainConfig,
};
use scibilic_core::unet::{build_model, NetworkWeights, UNetConfig, LOG_VAR_MAX, LOG_VAR_MIN};
use scibilic_core::{RngStream, Tensor};

fn small_unet() -> UNetConfig {
    UNetConfig {
        levels: 2,
        base_channels: 4,
        ..UNetConfig::default()
    }
}

fn phantoms(size: usize, n_train: usize, n_val: usize, seed: u64) -> Dataset {
    let spec = PhantomSpec {
        size: (size, size),
        ..PhantomSpec::default()
    };
    build_dataset(n_train, n_val, &spec, seed).unwrap()
}

fn param_bits(w: &NetworkWeights<f32>) -> Vec<Vec<u32>> {
    w.params()
        .iter()
        .map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

proptest! {
    /// Central differences, entry by entry, including log-variances at the
    /// clamp bounds where `exp(-s)` is largest.
    #[test]
    fn loss_partials_match_finite_differences(seed in any::<u64>(), extreme in any::<bool>()) {
        let mut rng = RngStream::new(seed);
        let mut draw = |lo: f64, hi: f64| Tensor::<f64>::from_fn(&[2, 3], |_| lo + (hi - lo) * rng.uniform());
        let y = draw(-2.0, 2.0);
        let y_hat = draw(-2.0, 2.0);
        let s = if extreme {
            Tensor::from_fn(&[2, 3], |i| if i % 2 == 0 { LOG_VAR_MIN } else { LOG_VAR_MAX })
        } else {
            draw(LOG_VAR_MIN, LOG_VAR_MAX)
        };
        let out = heteroscedastic_loss(&y, &y_hat, &s).unwrap();
        for (which, base, analytic) in [(0, &y_hat, &out.grad_y_hat), (1, &s, &out.grad_log_sigma2)] {
            for i in 0..6 {
                let h = 1e-6 * base.data()[i].abs().max(1.0);
                let shifted = |d: f64| {
                    let mut p = base.clone();
                    p.data_mut()[i] += d;
                    let (a, b) = if which == 0 { (&p, &s) } else { (&y_hat, &p) };
                    heteroscedastic_loss(&y, a, b).unwrap().loss
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                // Round-off of a difference quotient of a loss of size |L|.
                let roundoff = 8.0 * f64::EPSILON * out.loss.abs().max(1.0) / h;
                prop_assert!(
                    (a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()) + roundoff,
                    "input {which} entry {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}

#[test]
fn loss_two_element_hand_case() {
    let y = Tensor::new(vec![2], vec![1.0f64, 0.0]).unwrap();
    let y_hat = Tensor::zeros(&[2]);
    let s = Tensor::new(vec![2], vec![0.0, 4f64.ln()]).unwrap();
    let loss = heteroscedastic_loss(&y, &y_hat, &s).unwrap().loss;
    assert!((loss - 0.596_573_590_279_972_6).abs() < 1e-12, "{loss}");
}

#[test]
fn full_size_patch_is_the_whole_volume() {
    let data = phantoms(32, 2, 1, 1);
    let cfg = TrainConfig {
        patch_size: (32, 32),
        batch_size: 4,
        ..TrainConfig::default()
    };
    let batch = sample_patches(&data, &cfg, &mut RngStream::new(2)).unwrap();
    for (k, &(idx, top, left)) in batch.origins.iter().enumerate() {
        assert_eq!((top, left), (0, 0));
        let n = 32 * 32;
        assert_eq!(
            &batch.input.data()[k * n..(k + 1) * n],
            data.samples[idx].input.data()
        );
        assert_eq!(
            &batch.target.data()[k * n..(k + 1) * n],
            data.samples[idx].target.data()
        );
    }
}

#[test]
fn patches_are_colocated_and_reproducible() {
    let data = phantoms(64, 3, 1, 3);
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let a = sample_patches(&data, &cfg, &mut RngStream::new(4)).unwrap();
    let b = sample_patches(&data, &cfg, &mut RngStream::new(4)).unwrap();
    assert_eq!(a.origins, b.origins);
    assert_eq!(a.input.data(), b.input.data());
    for (k, &(idx, top, left)) in a.origins.iter().enumerate() {
        let s = &data.samples[idx];
        assert_eq!(s.role, Role::Train);
        let want = s.target.crop(top, left, 32, 32).unwrap();
        assert_eq!(&a.target.data()[k * 1024..(k + 1) * 1024], want.data());
    }
}

#[test]
fn patch_offsets_are_uniform() {
    let data = phantoms(64, 1, 1, 5);
    let cfg = TrainConfig {
        batch_size: 100,
        ..TrainConfig::default()
    };
    let mut rng = RngStream::new(6);
    let cells = 33 * 33;
    let mut counts = vec![0u32; cells];
    for _ in 0..100 {
        for &(_, top, left) in &sample_patches(&data, &cfg, &mut rng).unwrap().origins {
            counts[top * 33 + left] += 1;
        }
    }
    let n = 10_000.0;
    let expected = n / cells as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // Chi-square with `cells - 1` degrees of freedom: mean k, variance 2k.
    let k = (cells - 1) as f64;
    assert!(
        (chi2 - k).abs() < 3.0 * (2.0 * k).sqrt(),
        "chi2 {chi2} for {k} dof"
    );
}

#[test]
fn undersized_volumes_are_skipped() {
    let mut data = phantoms(32, 1, 1, 7);
    let mut big = phantoms(64, 1, 1, 8).samples.remove(0);
    big.index = 9;
    data.samples.push(big);
    let cfg = TrainConfig {
        patch_size: (48, 48),
        batch_size: 10,
        ..TrainConfig::default()
    };
    let batch = sample_patches(&data, &cfg, &mut RngStream::new(9)).unwrap();
    assert!(batch.origins.iter().all(|&(idx, _, _)| idx == 2));

    let small_only = phantoms(32, 2, 1, 10);
    assert!(sample_patches(&small_only, &cfg, &mut RngStream::new(9)).is_err());
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let data = phantoms(32, 1, 1, 11);
    let init: NetworkWeights<f32> = build_model(&small_unet(), &mut RngStream::new(12)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        batches_per_epoch: 4,
        batch_size: 2,
        seed: 13,
        ..TrainConfig::default()
    };
    let out = train(init.clone(), &data, &cfg).unwrap();
    assert_eq!(param_bits(&out.weights), param_bits(&init));
}

#[test]
fn seeded_runs_are_identical() {
    let data = phantoms(32, 2, 1, 14);
    let cfg = TrainConfig {
        epochs: 3,
        batches_per_epoch: 3,
        batch_size: 2,
        seed: 15,
        ..TrainConfig::default()
    };
    let run = || {
        let init = build_model(&small_unet(), &mut RngStream::new(16)).unwrap();
        train(init, &data, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(param_bits(&a.weights), param_bits(&b.weights));
    assert_eq!(a.history.len(), 3);
    assert!(a.diverged.is_none());
}

#[test]
fn overfits_a_single_pair() {
    let mut data = phantoms(32, 1, 1, 17);
    // Validate on the very pair being fitted.
    let mut copy: Sample = data.samples[0].clone();
    copy.role = Role::Validation;
    data.samples[1] = copy;
    let init = build_model(&UNetConfig::default(), &mut RngStream::new(18)).unwrap();
    let before = validation_loss(&init, &data).unwrap().unwrap();
    assert_eq!(validation_loss(&init, &data).unwrap(), Some(before));
    let cfg = TrainConfig {
        epochs: 1,
        batches_per_epoch: 200,
        batch_size: 1,
        seed: 19,
        ..TrainConfig::default()
    };
    let out = train(init, &data, &cfg).unwrap();
    let after = validation_loss(&out.weights, &data).unwrap().unwrap();
    assert!(
        after <= before - 0.5 * before.abs(),
        "loss {before} -> {after}"
    );
}

#[test]
fn empty_training_split_rejected() {
    let mut data = phantoms(32, 1, 1, 20);
    data.samples.retain(|s| s.role == Role::Validation);
    let init = build_model(&small_unet(), &mut RngStream::new(21)).unwrap();
    assert!(train(init, &data, &TrainConfig::default()).is_err());
}
