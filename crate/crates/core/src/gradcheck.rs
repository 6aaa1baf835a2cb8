//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check draws a small random instance, projects the op output onto a
//! random direction `w` so the objective is the scalar `L(x) = Σ w·f(x)`,
//! and compares the analytic gradient of `L` against central differences
//! over every input coordinate. The error reported is norm-wise:
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.
//! Per-coordinate relative error is meaningless for coordinates whose
//! gradient is near zero, which random instances always contain.
//!
//! Central differences are only valid where the objective is smooth over
//! `[x − h, x + h]`. The single-op checks draw inputs away from kinks; the
//! whole-network check compares ReLU/clamp activation patterns at `x ± h`
//! with the pattern at `x` and leaves out coordinates whose probe crosses a
//! kink, reporting how many were left out.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ops::{
    clamp, clamp_grad, concat_channels, conv2d, conv2d_grad, nearest_upsample,
    nearest_upsample_grad, relu, relu_grad, spatial_dropout, split_channels, DropoutMode,
};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{heteroscedastic_loss, loss_and_gradients};
use crate::unet::{build_model, ForwardMode, NetworkWeights, UNetConfig};

/// Step and pass threshold for one precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub max_rel_error: f64,
}

/// `h = 1e-3`, `< 1e-2` for f32; `h = 1e-5`, `< 1e-5` for f64.
pub fn tolerance<T: Real>() -> Tolerance {
    if std::mem::size_of::<T>() == 4 {
        Tolerance {
            step: 1e-3,
            max_rel_error: 1e-2,
        }
    } else {
        Tolerance {
            step: 1e-5,
            max_rel_error: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    /// Largest norm-wise relative error over all trials and operands.
    pub worst: f64,
    pub compared: usize,
    /// Coordinates left out because their probe crossed a kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckResult {
    /// Below tolerance, with at least 90% of probed coordinates compared.
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance && self.compared > 0 && self.skipped * 9 <= self.compared
    }
}

fn dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}

/// Outcome of comparing one analytic gradient tensor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Comparison {
    /// Norm-wise relative error over the compared coordinates.
    pub error: f64,
    pub compared: usize,
    /// Coordinates whose probe crossed a kink.
    pub skipped: usize,
    /// `‖a − n‖²`, `‖a‖²`, `‖n‖²`, kept so comparisons can be pooled.
    sums: (f64, f64, f64),
}

impl Comparison {
    fn from_sums(sums: (f64, f64, f64), compared: usize, skipped: usize) -> Self {
        let (diff2, a2, n2) = sums;
        let scale = a2.sqrt().max(n2.sqrt());
        Self {
            error: if scale == 0.0 {
                0.0
            } else {
                diff2.sqrt() / scale
            },
            compared,
            skipped,
            sums,
        }
    }

    /// Treats both as parts of one gradient vector.
    fn pool(self, other: Comparison) -> Comparison {
        let (a, b) = (self.sums, other.sums);
        Comparison::from_sums(
            (a.0 + b.0, a.1 + b.1, a.2 + b.2),
            self.compared + other.compared,
            self.skipped + other.skipped,
        )
    }

    /// Keeps the worse error of two separately judged comparisons.
    fn merge(self, other: Comparison) -> Comparison {
        let error = if self.error.is_nan() || other.error.is_nan() {
            f64::INFINITY
        } else {
            self.error.max(other.error)
        };
        Comparison {
            error,
            compared: self.compared + other.compared,
            skipped: self.skipped + other.skipped,
            sums: (0.0, 0.0, 0.0),
        }
    }
}

/// Norm-wise relative error between `analytic` and the central-difference
/// gradient of a smooth `objective` at `x`.
pub fn compare<T: Real>(
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    step: f64,
    mut objective: impl FnMut(&Tensor<T>) -> Result<f64>,
) -> Result<Comparison> {
    compare_piecewise(x, analytic, step, |p| Ok((objective(p)?, Vec::new())))
}

/// Like [`compare`] for a piecewise-smooth objective that also reports its
/// activation pattern; coordinates whose `x ± h` pattern differs from the
/// pattern at `x` are skipped.
pub fn compare_piecewise<T: Real>(
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    step: f64,
    mut objective: impl FnMut(&Tensor<T>) -> Result<(f64, Vec<bool>)>,
) -> Result<Comparison> {
    let (_, base) = objective(x)?;
    let mut probe = x.clone();
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut compared, mut skipped) = (0, 0);
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let hi = T::from_f64(x0.as_f64() + step);
        let lo = T::from_f64(x0.as_f64() - step);
        probe.data_mut()[i] = hi;
        let (f_hi, p_hi) = objective(&probe)?;
        probe.data_mut()[i] = lo;
        let (f_lo, p_lo) = objective(&probe)?;
        probe.data_mut()[i] = x0;
        if p_hi != base || p_lo != base {
            skipped += 1;
            continue;
        }
        // The representable step, not the requested one.
        let numeric = (f_hi - f_lo) / (hi.as_f64() - lo.as_f64());
        let a = analytic.data()[i].as_f64();
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        compared += 1;
    }
    Ok(Comparison::from_sums((diff2, a2, n2), compared, skipped))
}

struct Draw<'a> {
    rng: &'a mut RngStream,
    normal: Normal<f64>,
}

impl Draw<'_> {
    fn tensor<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.normal.sample(self.rng)))
    }

    /// Values with `|v| >= margin`, away from kinks at zero.
    fn away_from_zero<T: Real>(&mut self, shape: &[usize], margin: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let v: f64 = self.normal.sample(self.rng);
            T::from_f64(v.signum() * (v.abs() + margin))
        })
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.rng.below(hi - lo + 1)
    }
}

fn check_conv<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let n = d.range(1, 2);
    let c = d.range(1, 3);
    let f = d.range(1, 3);
    let k = [1, 3, 5][d.range(0, 2)];
    let stride = d.range(1, 2);
    let pad = k / 2;
    let (h, w) = (d.range(k.max(2), 6), d.range(k.max(2), 6));
    let x: Tensor<T> = d.tensor(&[n, c, h, w]);
    let kernel: Tensor<T> = d.tensor(&[f, c, k, k]);
    let bias: Tensor<T> = d.tensor(&[f]);
    let out = conv2d(&x, &kernel, &bias, stride, pad)?;
    let proj: Tensor<T> = d.tensor(out.shape());
    let g = conv2d_grad(&x, &kernel, &bias, stride, pad, &proj)?;
    let gx = compare(&x, &g.input, step, |p| {
        Ok(dot(&conv2d(p, &kernel, &bias, stride, pad)?, &proj))
    })?;
    let gk = compare(&kernel, &g.kernel, step, |p| {
        Ok(dot(&conv2d(&x, p, &bias, stride, pad)?, &proj))
    })?;
    let gb = compare(&bias, &g.bias, step, |p| {
        Ok(dot(&conv2d(&x, &kernel, p, stride, pad)?, &proj))
    })?;
    Ok(gx.merge(gk).merge(gb))
}

fn check_upsample<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let shape = [d.range(1, 2), d.range(1, 3), d.range(1, 4), d.range(1, 4)];
    let factor = d.range(1, 3);
    let x: Tensor<T> = d.tensor(&shape);
    let proj: Tensor<T> = d.tensor(nearest_upsample(&x, factor)?.shape());
    let g = nearest_upsample_grad(&proj, factor)?;
    compare(&x, &g, step, |p| {
        Ok(dot(&nearest_upsample(p, factor)?, &proj))
    })
}

fn check_dropout<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let shape = [d.range(1, 3), d.range(1, 4), d.range(1, 4), d.range(1, 4)];
    let x: Tensor<T> = d.tensor(&shape);
    let (_, mask) = spatial_dropout(&x, 0.5, DropoutMode::Train, d.rng)?;
    let mask = mask.expect("p > 0 in train mode yields a mask");
    let proj: Tensor<T> = d.tensor(&shape);
    let g = crate::ops::spatial_dropout_grad(Some(&mask), &proj)?;
    compare(&x, &g, step, |p| Ok(dot(&mask.apply(p)?, &proj)))
}

fn check_relu<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let shape = [d.range(1, 2), d.range(1, 3), d.range(1, 5), d.range(1, 5)];
    let x: Tensor<T> = d.away_from_zero(&shape, 0.05);
    let proj: Tensor<T> = d.tensor(&shape);
    let g = relu_grad(&x, &proj)?;
    compare(&x, &g, step, |p| Ok(dot(&relu(p), &proj)))
}

fn check_concat<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let (n, h, w) = (d.range(1, 2), d.range(1, 4), d.range(1, 4));
    let (ca, cb) = (d.range(1, 3), d.range(1, 3));
    let a: Tensor<T> = d.tensor(&[n, ca, h, w]);
    let b: Tensor<T> = d.tensor(&[n, cb, h, w]);
    let proj: Tensor<T> = d.tensor(&[n, ca + cb, h, w]);
    let (ga, gb) = split_channels(&proj, ca)?;
    let ca = compare(&a, &ga, step, |p| Ok(dot(&concat_channels(p, &b)?, &proj)))?;
    let cb = compare(&b, &gb, step, |p| Ok(dot(&concat_channels(&a, p)?, &proj)))?;
    Ok(ca.merge(cb))
}

fn check_clamp<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let shape = [1, d.range(1, 3), d.range(1, 5), d.range(1, 5)];
    // Uniform on [-2, 2], rejecting values within 0.05 of either bound.
    let x: Tensor<T> = Tensor::from_fn(&shape, |_| loop {
        let v = 4.0 * d.rng.uniform() - 2.0;
        if (v.abs() - 1.0).abs() >= 0.05 {
            break T::from_f64(v);
        }
    });
    let (lo, hi) = (T::from_f64(-1.0), T::from_f64(1.0));
    let proj: Tensor<T> = d.tensor(&shape);
    let g = clamp_grad(&x, lo, hi, &proj)?;
    compare(&x, &g, step, |p| Ok(dot(&clamp(p, lo, hi), &proj)))
}

fn check_loss<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let shape = [d.range(1, 2), 1, d.range(1, 4), d.range(1, 4)];
    let y: Tensor<T> = d.tensor(&shape);
    let y_hat: Tensor<T> = d.tensor(&shape);
    let s: Tensor<T> = d.tensor(&shape);
    let out = heteroscedastic_loss(&y, &y_hat, &s)?;
    let gy = compare(&y_hat, &out.grad_y_hat, step, |p| {
        Ok(heteroscedastic_loss(&y, p, &s)?.loss)
    })?;
    let gs = compare(&s, &out.grad_log_sigma2, step, |p| {
        Ok(heteroscedastic_loss(&y, &y_hat, p)?.loss)
    })?;
    Ok(gy.merge(gs))
}

/// End to end through the tape: loss of a one-level network with dropout
/// active (masks replayed from a fixed stream) against every parameter,
/// judged as one gradient vector. Per-tensor errors would be dominated by
/// round-off in tensors whose gradient is tiny; the single-op checks above
/// already judge each op tensor by tensor.
fn check_network<T: Real>(d: &mut Draw<'_>, step: f64) -> Result<Comparison> {
    let config = UNetConfig {
        levels: 1,
        base_channels: 2,
        ..UNetConfig::default()
    };
    let init_seed = d.rng.next_u64();
    let mut weights: NetworkWeights<T> = build_model(&config, &mut RngStream::new(init_seed))?;
    // With zero biases a dropped-out input channel leaves its conv output
    // exactly on the ReLU kink; random biases keep the skip count low.
    for p in weights
        .params_mut()
        .iter_mut()
        .filter(|p| p.name.ends_with(".bias"))
    {
        p.tensor = d.tensor(p.tensor.shape()).map(|v| v * T::from_f64(0.5));
    }
    let x: Tensor<T> = d.tensor(&[1, 1, 4, 4]);
    let y: Tensor<T> = d.tensor(&[1, 1, 4, 4]);
    let mask_seed = d.rng.next_u64();
    let (_, grads) = loss_and_gradients(
        &weights,
        &x,
        &y,
        ForwardMode::Train,
        &mut RngStream::new(mask_seed),
    )?;
    let mut total = Comparison::default();
    for slot in 0..weights.params().len() {
        let base = weights.params()[slot].tensor.clone();
        let mut probe = weights.clone();
        let c = compare_piecewise(&base, &grads[slot], step, |p| {
            probe.params_mut()[slot].tensor = p.clone();
            let mut tape = Tape::new();
            let mut masks = RngStream::new(mask_seed);
            let (y_hat, log_var) =
                probe.forward_on_tape(&mut tape, x.clone(), ForwardMode::Train, &mut masks)?;
            let loss = heteroscedastic_loss(&y, tape.value(y_hat), tape.value(log_var))?.loss;
            Ok((loss, tape.activation_pattern()))
        })?;
        total = total.pool(c);
    }
    Ok(total)
}

type Check = fn(&mut Draw<'_>, f64) -> Result<Comparison>;

fn checks<T: Real>() -> [(&'static str, Check); 8] {
    [
        ("conv2d", check_conv::<T>),
        ("nearest_upsample", check_upsample::<T>),
        ("spatial_dropout", check_dropout::<T>),
        ("relu", check_relu::<T>),
        ("concat_channels", check_concat::<T>),
        ("clamp", check_clamp::<T>),
        ("heteroscedastic_loss", check_loss::<T>),
        ("network", check_network::<T>),
    ]
}

/// Runs `trials` seeded instances of every check in precision `T`.
pub fn check_all<T: Real>(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let tol = tolerance::<T>();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let root = RngStream::new(seed);
    checks::<T>()
        .into_iter()
        .map(|(name, check)| {
            let mut total = Comparison::default();
            for t in 0..trials {
                let mut rng = root.derive_indexed(name, t as u64);
                let mut draw = Draw {
                    rng: &mut rng,
                    normal,
                };
                total = total.merge(check(&mut draw, tol.step)?);
            }
            Ok(CheckResult {
                name,
                trials,
                worst: total.error,
                compared: total.compared,
                skipped: total.skipped,
                tolerance: tol.max_rel_error,
            })
        })
        .collect()
}
