use std::cell::Cell;

use proptest::prelude::*;
use rand_distr::{Distribution, Normal};
use scibilic_core::mc::{
    decompose, mc_predict, plan_segments, scibilic_map, segmented_inference, McConfig, Predictor,
};
use scibilic_core::unet::{build_model, ForwardMode, NetworkWeights, UNetConfig};
use scibilic_core::{Result, RngStream, Tensor, Volume};

/// Replays a fixed list of `(ŷ, σ̂²)` constants, one per call.
struct Scripted {
    values: Vec<(f32, f32)>,
    calls: Cell<usize>,
}

impl Predictor for Scripted {
    fn divisor(&self) -> usize {
        1
    }

    fn sample(&self, x: &Tensor<f32>, _rng: &mut RngStream) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (y, s) = self.values[self.calls.get() % self.values.len()];
        self.calls.set(self.calls.get() + 1);
        Ok((Tensor::full(x.shape(), y), Tensor::full(x.shape(), s)))
    }
}

/// A frozen mean plus Gaussian output noise of known variance.
struct Noisy {
    std: f64,
}

impl Predictor for Noisy {
    fn divisor(&self) -> usize {
        1
    }

    fn sample(&self, x: &Tensor<f32>, rng: &mut RngStream) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let normal = Normal::new(0.0, self.std).unwrap();
        let y = Tensor::from_fn(x.shape(), |i| {
            (x.data()[i] as f64 + normal.sample(rng)) as f32
        });
        Ok((y, Tensor::full(x.shape(), 1.0)))
    }
}

fn small_net(dropout_rate: f64, levels: usize, seed: u64) -> NetworkWeights<f32> {
    let cfg = UNetConfig {
        levels,
        base_channels: 4,
        dropout_rate,
        ..UNetConfig::default()
    };
    build_model(&cfg, &mut RngStream::new(seed)).unwrap()
}

fn image(h: usize, w: usize, seed: u64) -> Volume {
    let mut rng = RngStream::new(seed);
    Volume::new(
        vec![h, w],
        (0..h * w).map(|_| rng.uniform() as f32).collect(),
    )
    .unwrap()
}

fn bits(v: &Volume) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn two_sample_decomposition_through_mc_predict() {
    let p = Scripted {
        values: vec![(1.0, 2.0), (3.0, 4.0)],
        calls: Cell::new(0),
    };
    let cfg = McConfig {
        samples: 2,
        ..McConfig::default()
    };
    let out = mc_predict(&p, &image(3, 2, 0), &cfg).unwrap();
    assert!(out.mean.data().iter().all(|&v| v == 2.0));
    assert!(out.epistemic.data().iter().all(|&v| v == 1.0));
    assert!(out.aleatoric.data().iter().all(|&v| v == 3.0));
    let want = 1.0 / (3.0 + 1e-6);
    assert!(out
        .scibilic
        .data()
        .iter()
        .all(|&v| (v as f64 - want).abs() < 1e-7));
    assert!((want - 0.333333).abs() < 1e-6);
}

#[test]
fn zero_samples_rejected() {
    let cfg = McConfig {
        samples: 0,
        ..McConfig::default()
    };
    let net = small_net(0.2, 2, 1);
    assert!(mc_predict(&net, &image(16, 16, 1), &cfg).is_err());
    assert!(segmented_inference(&net, &image(16, 16, 1), &cfg).is_err());
}

#[test]
fn single_pass_matches_one_forward() {
    let net = small_net(0.2, 2, 2);
    let x = image(16, 24, 2);
    let cfg = McConfig {
        samples: 1,
        seed: 9,
        ..McConfig::default()
    };
    let out = mc_predict(&net, &x, &cfg).unwrap();
    assert!(out.epistemic.data().iter().all(|&e| e == 0.0));
    let mut rng = RngStream::new(9).derive_indexed("mc", 0);
    let direct = net
        .forward(&x.to_tensor().unwrap(), ForwardMode::McSample, &mut rng)
        .unwrap();
    let sigma2: Vec<f32> = direct.log_sigma2.data().iter().map(|s| s.exp()).collect();
    assert_eq!(out.aleatoric.data(), sigma2.as_slice());
    assert_eq!(out.mean.data(), direct.y_hat.data());
}

#[test]
fn no_dropout_no_epistemic() {
    let net = small_net(0.0, 2, 3);
    let cfg = McConfig {
        samples: 50,
        seed: 4,
        ..McConfig::default()
    };
    let out = mc_predict(&net, &image(16, 16, 3), &cfg).unwrap();
    let worst = out.epistemic.data().iter().fold(0.0f32, |a, &b| a.max(b));
    assert!(worst <= 1e-12, "max epistemic {worst}");
}

#[test]
fn maps_are_valid_and_reproducible() {
    let net = small_net(0.2, 2, 5);
    let x = image(16, 16, 5);
    let cfg = McConfig {
        samples: 8,
        seed: 6,
        ..McConfig::default()
    };
    let a = mc_predict(&net, &x, &cfg).unwrap();
    let b = mc_predict(&net, &x, &cfg).unwrap();
    assert_eq!(a, b);
    for out in [&a.mean, &a.epistemic, &a.aleatoric, &a.scibilic] {
        assert_eq!(out.dims(), x.dims());
    }
    assert!(a.epistemic.data().iter().all(|&e| e >= 0.0));
    assert!(a.aleatoric.data().iter().all(|&s| s >= (-10f32).exp()));
    assert!(a.epistemic.data().iter().any(|&e| e > 0.0));
    // The quotient is a pure function of the two variance maps.
    let again = scibilic_map(&a.epistemic, &a.aleatoric, cfg.scibilic_epsilon).unwrap();
    assert_eq!(bits(&again), bits(&a.scibilic));
}

#[test]
fn injected_noise_variance_recovered() {
    let std = 0.3;
    let cfg = McConfig {
        samples: 10_000,
        seed: 8,
        ..McConfig::default()
    };
    let out = mc_predict(&Noisy { std }, &image(2, 2, 8), &cfg).unwrap();
    for &e in out.epistemic.data() {
        let rel = (e as f64 - std * std).abs() / (std * std);
        assert!(rel < 0.05, "epistemic {e} vs {}", std * std);
    }
}

proptest! {
    /// Large offsets with small spread: the naive `E[y²] − E[y]²` in f32
    /// cancels badly, the two-pass estimator must not.
    #[test]
    fn epistemic_matches_two_pass_reference(
        offset in -1e3f32..1e3,
        spread in 1e-3f32..1.0,
        seed in any::<u64>(),
        t in 2usize..40,
    ) {
        let mut rng = RngStream::new(seed);
        let ys: Vec<[f32; 1]> = (0..t).map(|_| [offset + spread * (rng.uniform() as f32 - 0.5)]).collect();
        let ss: Vec<[f32; 1]> = vec![[1.0]; t];
        let out = decompose(&[1, 1], &ys, &ss, 1e-6).unwrap();
        let mean = ys.iter().map(|y| y[0] as f64).sum::<f64>() / t as f64;
        let var = ys.iter().map(|y| (y[0] as f64 - mean).powi(2)).sum::<f64>() / t as f64;
        let got = out.epistemic.data()[0] as f64;
        prop_assert!((got - var).abs() <= 1e-6 * var.max(f64::MIN_POSITIVE), "{got} vs {var}");
    }
}

#[test]
fn single_segment_is_bit_identical() {
    let net = small_net(0.2, 2, 10);
    let x = image(32, 24, 10);
    let cfg = McConfig {
        samples: 3,
        seed: 11,
        segment_tile: (64, 64),
        ..McConfig::default()
    };
    assert_eq!(plan_segments(32, 24, &cfg, net.divisor()).unwrap().len(), 1);
    let direct = mc_predict(&net, &x, &cfg).unwrap();
    let tiled = segmented_inference(&net, &x, &cfg).unwrap();
    for (a, b) in [
        (&direct.mean, &tiled.mean),
        (&direct.epistemic, &tiled.epistemic),
        (&direct.aleatoric, &tiled.aleatoric),
        (&direct.scibilic, &tiled.scibilic),
    ] {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn stitched_tiles_match_full_inference() {
    let net = small_net(0.0, 1, 12);
    let radius = net.config().receptive_field_radius();
    let overlap = 2 * radius;
    let x = image(96, 72, 12);
    let cfg = McConfig {
        samples: 1,
        seed: 13,
        segment_tile: (overlap + 12, overlap + 12),
        segment_overlap: overlap,
        ..McConfig::default()
    };
    assert!(plan_segments(96, 72, &cfg, net.divisor()).unwrap().len() > 4);
    let full = mc_predict(&net, &x, &cfg).unwrap();
    let tiled = segmented_inference(&net, &x, &cfg).unwrap();
    let worst = full
        .mean
        .data()
        .iter()
        .zip(tiled.mean.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 1e-5, "max stitched difference {worst}");
}
