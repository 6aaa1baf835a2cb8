//! Heteroscedastic maximum-likelihood training with AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::phantom::Dataset;
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unet::{ForwardMode, NetworkWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// An epoch is this many randomly drawn batches.
    pub batches_per_epoch: usize,
    /// `(height, width)` of training patches.
    pub patch_size: (usize, usize),
    /// Not part of the serialized form; callers derive it from a run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            betas: (0.9, 0.99),
            weight_decay: 1e-6,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 30,
            batches_per_epoch: 64,
            patch_size: (32, 32),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(invalid!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(invalid!(
                "learning rate and weight decay must be >= 0, epsilon > 0"
            ));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(invalid!("batch_size and batches_per_epoch must be >= 1"));
        }
        let (ph, pw) = self.patch_size;
        if ph == 0 || pw == 0 || ph % divisor != 0 || pw % divisor != 0 {
            return Err(invalid!(
                "patch size {ph}x{pw} must be positive and divisible by 2^levels = {divisor}"
            ));
        }
        Ok(())
    }
}

/// Loss value and its partials with respect to both network heads.
#[derive(Debug, Clone)]
pub struct LossOutput<T: Real> {
    pub loss: f64,
    pub grad_y_hat: Tensor<T>,
    pub grad_log_sigma2: Tensor<T>,
}

/// Mean Gaussian negative log-likelihood (up to a constant) with a
/// predicted per-voxel log-variance `s`:
///
/// ```text
/// L = 1/M · Σ ½·exp(−s)·(y − ŷ)² + ½·s
/// ```
pub fn heteroscedastic_loss<T: Real>(
    y: &Tensor<T>,
    y_hat: &Tensor<T>,
    log_sigma2: &Tensor<T>,
) -> Result<LossOutput<T>> {
    if y.shape() != y_hat.shape() || y.shape() != log_sigma2.shape() {
        return Err(shape_err!(
            "loss operands disagree: y {:?}, y_hat {:?}, log_sigma2 {:?}",
            y.shape(),
            y_hat.shape(),
            log_sigma2.shape()
        ));
    }
    if y.is_empty() {
        return Err(invalid!("loss over zero elements"));
    }
    let m = y.len() as f64;
    let mut total = 0.0;
    let mut gy = Vec::with_capacity(y.len());
    let mut gs = Vec::with_capacity(y.len());
    for ((&t, &p), &s) in y.data().iter().zip(y_hat.data()).zip(log_sigma2.data()) {
        let (t, p, s) = (t.as_f64(), p.as_f64(), s.as_f64());
        let r = t - p;
        let precision = (-s).exp();
        total += 0.5 * precision * r * r + 0.5 * s;
        gy.push(T::from_f64(-precision * r / m));
        gs.push(T::from_f64(0.5 * (1.0 - precision * r * r) / m));
    }
    Ok(LossOutput {
        loss: total / m,
        grad_y_hat: Tensor::new(y.shape().to_vec(), gy)?,
        grad_log_sigma2: Tensor::new(y.shape().to_vec(), gs)?,
    })
}

/// AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_weights(weights: &NetworkWeights<T>) -> Self {
        Self::new(weights.params().iter().map(|p| &p.tensor))
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// m ← β₁m + (1−β₁)g          m̂ = m / (1−β₁ᵗ)
/// v ← β₂v + (1−β₂)g²         v̂ = v / (1−β₂ᵗ)
/// w ← w − lr·(m̂ / (√v̂ + ε) + wd·w)
/// ```
///
/// Non-finite or misshapen gradients reject the whole step and leave both
/// weights and state untouched.
pub fn adamw_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape_err!(
                "adamw: slot {i} param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient slot {i}")));
        }
    }

    state.t += 1;
    let (b1, b2) = config.betas;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, wd, eps) = (config.learning_rate, config.weight_decay, config.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let m_hat = mj / c1;
            let v_hat = vj / c2;
            let wj = w.as_f64();
            *w = T::from_f64(wj - lr * (m_hat / (v_hat.sqrt() + eps) + wd * wj));
        }
    }
    Ok(())
}

/// Co-located input/target patches stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    /// `(sample index in dataset.samples, top, left)` per patch.
    pub origins: Vec<(usize, usize, usize)>,
}

/// Draws `batch_size` patches from the training split: a training volume
/// uniformly at random, then an offset uniformly over all positions where
/// the patch fits.
pub fn sample_patches(
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<PatchBatch> {
    let (ph, pw) = config.patch_size;
    let mut eligible = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.role != crate::phantom::Role::Train {
            continue;
        }
        let (h, w) = s.input.hw()?;
        if h >= ph && w >= pw {
            eligible.push(i);
        } else {
            log::warn!(
                "sample {} ({h}x{w}) is smaller than the {ph}x{pw} patch and is skipped",
                s.index
            );
        }
    }
    if eligible.is_empty() {
        return Err(invalid!("no training volume is at least {ph}x{pw}"));
    }
    let b = config.batch_size;
    let mut input = Vec::with_capacity(b * ph * pw);
    let mut target = Vec::with_capacity(b * ph * pw);
    let mut origins = Vec::with_capacity(b);
    for _ in 0..b {
        let idx = eligible[rng.below(eligible.len())];
        let s = &dataset.samples[idx];
        let (h, w) = s.input.hw()?;
        let top = rng.below(h - ph + 1);
        let left = rng.below(w - pw + 1);
        input.extend_from_slice(s.input.crop(top, left, ph, pw)?.data());
        target.extend_from_slice(s.target.crop(top, left, ph, pw)?.data());
        origins.push((idx, top, left));
    }
    Ok(PatchBatch {
        input: Tensor::new(vec![b, 1, ph, pw], input)?,
        target: Tensor::new(vec![b, 1, ph, pw], target)?,
        origins,
    })
}

/// Forward, loss and backward for one batch. Returns the loss and one
/// gradient per parameter, in parameter order.
pub fn loss_and_gradients<T: Real>(
    weights: &NetworkWeights<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    mode: ForwardMode,
    rng: &mut RngStream,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let (y_hat, log_sigma2) = weights.forward_on_tape(&mut tape, x.clone(), mode, rng)?;
    let out = heteroscedastic_loss(y, tape.value(y_hat), tape.value(log_sigma2))?;
    let slots = weights.params().len();
    let grads = tape.backward(
        vec![(y_hat, out.grad_y_hat), (log_sigma2, out.grad_log_sigma2)],
        slots,
    )?;
    let grads = grads
        .into_iter()
        .zip(weights.params())
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok((out.loss, grads))
}

/// Mean loss over full validation volumes with dropout disabled.
pub fn validation_loss(weights: &NetworkWeights<f32>, dataset: &Dataset) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut n = 0;
    // Deterministic mode never draws from the stream.
    let mut rng = RngStream::new(0);
    for s in dataset.validation() {
        let out = weights.forward(&s.input.to_tensor()?, ForwardMode::Deterministic, &mut rng)?;
        let y = s.target.to_tensor()?;
        total += heteroscedastic_loss(&y, &out.y_hat, &out.log_sigma2)?.loss;
        n += 1;
    }
    Ok((n > 0).then(|| total / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss (training loss
    /// when there is no validation split). On divergence, the best weights
    /// seen before the non-finite step.
    pub weights: NetworkWeights<f32>,
    pub history: Vec<EpochRecord>,
    pub diverged: Option<Divergence>,
}

/// Fits `initial` on the training split.
///
/// Patch offsets come from the `(seed, "patches")` stream; the dropout masks
/// of global step `k` come from `(seed, "dropout", k)`.
pub fn train(
    initial: NetworkWeights<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(initial.config().divisor())?;
    if dataset.train().next().is_none() {
        return Err(invalid!("training split is empty"));
    }
    let root = RngStream::new(config.seed);
    let mut patch_rng = root.derive("patches");
    let mut weights = initial;
    let mut state = OptimState::for_weights(&weights);
    let mut best: Option<(f64, NetworkWeights<f32>)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for _ in 0..config.batches_per_epoch {
            let batch = sample_patches(dataset, config, &mut patch_rng)?;
            let mut drop_rng = root.derive_indexed("dropout", step);
            let result = loss_and_gradients(
                &weights,
                &batch.input,
                &batch.target,
                ForwardMode::Train,
                &mut drop_rng,
            );
            let stepped = match result {
                Ok((loss, grads)) if loss.is_finite() => adamw_step(
                    weights.params_mut().iter_mut().map(|p| &mut p.tensor),
                    &grads,
                    &mut state,
                    config,
                )
                .map(|()| loss),
                Ok(_) => Err(Error::NonFinite("loss".into())),
                Err(e) => Err(e),
            };
            let loss = match stepped {
                Ok(loss) if weights.params().iter().all(|p| p.tensor.is_finite()) => loss,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    log::error!("training diverged at epoch {epoch}, step {step}");
                    let weights = best.map(|(_, w)| w).unwrap_or(weights);
                    return Ok(TrainOutcome {
                        weights,
                        history,
                        diverged: Some(Divergence { epoch, step }),
                    });
                }
                Err(e) => return Err(e),
            };
            sum += loss;
            step += 1;
        }
        let train_loss = sum / config.batches_per_epoch as f64;
        let val_loss = validation_loss(&weights, dataset)?;
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {}",
            val_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if score.is_finite() && best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, weights.clone()));
        }
    }
    let weights = best.map(|(_, w)| w).unwrap_or(weights);
    Ok(TrainOutcome {
        weights,
        history,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn loss_hand_cases() {
        let zero =
            heteroscedastic_loss(&t(&[0.3, -1.0]), &t(&[0.3, -1.0]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!(zero.loss, 0.0);
        let half = heteroscedastic_loss(&t(&[1.0]), &t(&[0.0]), &t(&[0.0])).unwrap();
        assert!((half.loss - 0.5).abs() < 1e-12);
        let two =
            heteroscedastic_loss(&t(&[1.0, 0.0]), &t(&[0.0, 0.0]), &t(&[0.0, 4f64.ln()])).unwrap();
        assert!(
            (two.loss - 0.596_573_590_279_972_6).abs() < 1e-6,
            "{}",
            two.loss
        );
    }

    #[test]
    fn loss_shape_mismatch() {
        assert!(heteroscedastic_loss(&t(&[1.0]), &t(&[0.0, 1.0]), &t(&[0.0])).is_err());
    }

    #[test]
    fn adamw_zero_gradient_no_decay() {
        let mut w = vec![t(&[1.0, -2.0])];
        let mut state = OptimState::new(&w);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut w, &[t(&[0.0, 0.0])], &mut state, &cfg).unwrap();
        assert_eq!(w[0].data(), [1.0, -2.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adamw_first_step() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut w = vec![t(&[1.0])];
        let mut state = OptimState::new(&w);
        adamw_step(&mut w, &[t(&[1.0])], &mut state, &cfg).unwrap();
        let expected = 1.0 - 0.003 / (1.0 + 1e-8);
        assert!((w[0].data()[0] - expected).abs() < 1e-15);

        let cfg_wd = TrainConfig {
            weight_decay: 1e-6,
            ..cfg
        };
        let mut w2 = vec![t(&[1.0])];
        let mut state2 = OptimState::new(&w2);
        adamw_step(&mut w2, &[t(&[1.0])], &mut state2, &cfg_wd).unwrap();
        assert!((w[0].data()[0] - w2[0].data()[0] - 3e-9).abs() < 1e-15);
    }

    #[test]
    fn adamw_pure_decay() {
        let cfg = TrainConfig::default();
        let mut w = vec![t(&[2.0, -4.0])];
        let mut state = OptimState::new(&w);
        for _ in 0..3 {
            let before = w[0].clone();
            adamw_step(&mut w, &[t(&[0.0, 0.0])], &mut state, &cfg).unwrap();
            for (a, b) in w[0].data().iter().zip(before.data()) {
                assert!((b - a - 0.003 * 1e-6 * b).abs() < 1e-15 * b.abs());
            }
        }
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let cfg = TrainConfig::default();
        let mut w = vec![t(&[1.0, 2.0])];
        let mut state = OptimState::new(&w);
        let before = (w.clone(), state.clone());
        assert!(adamw_step(&mut w, &[t(&[f64::NAN, 0.0])], &mut state, &cfg).is_err());
        assert_eq!((w, state), before);
    }
}
