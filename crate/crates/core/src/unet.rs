//! Dual-head encoder-decoder with spatial dropout.
//!
//! ```text
//! x ─ enc0 ─ enc1 ─ … ─ bottleneck ─ … ─ dec1 ─ dec0 ─ ⊕x ─┬─ head_mean   → ŷ
//!      └────────── skip (concat) ──────────┘                └─ head_logvar → log σ̂²
//! ```
//!
//! Each encoder level runs two 3×3 convs and a stride-2 3×3 conv; each
//! decoder level upsamples ×2 (nearest), applies a 5×5 conv, concatenates the
//! matching skip and runs two 3×3 convs. Every conv outside the heads is
//! followed by ReLU and spatial dropout. Each head is a 3×3 conv (ReLU) and a
//! 1×1 conv, without dropout.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::DropoutMode;
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bounds applied to the log-variance head.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub input_channels: usize,
    /// Kernel extents of the two convs in each head.
    pub head_kernels: [usize; 2],
    pub upsample_conv_kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            dropout_rate: 0.2,
            input_channels: 1,
            head_kernels: [3, 1],
            upsample_conv_kernel: 5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return Err(invalid!(
                "levels, base_channels and input_channels must be >= 1 (got {}, {}, {})",
                self.levels,
                self.base_channels,
                self.input_channels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            ));
        }
        let kernels = [
            self.head_kernels[0],
            self.head_kernels[1],
            self.upsample_conv_kernel,
        ];
        if kernels.iter().any(|k| k % 2 == 0) {
            return Err(invalid!("kernel extents must be odd, got {kernels:?}"));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Conservative bound on how far (in input voxels) an output voxel can see.
    pub fn receptive_field_radius(&self) -> usize {
        let half = |k: usize| (k - 1) / 2;
        let mut r = 0;
        for l in 0..self.levels {
            let scale = 1 << l;
            // enc: two 3x3 + stride-2 3x3 (+1 for the coarse grid alignment)
            r += (1 + 1 + 1 + 1) * scale;
            // dec: upsample alignment, up conv, two 3x3
            r += (1 + half(self.upsample_conv_kernel) + 1 + 1) * scale;
        }
        r += 2 * (1 << self.levels);
        r + half(self.head_kernels[0]) + half(self.head_kernels[1])
    }

    /// Ordered conv layers of the network.
    pub fn layer_plan(&self) -> Vec<LayerSpec> {
        let mut plan = Vec::new();
        let body = |name: String, inp, out, kernel, stride| LayerSpec {
            name,
            in_channels: inp,
            out_channels: out,
            kernel,
            stride,
            relu: true,
            dropout: true,
            role: LayerRole::Body,
        };
        let mut ch = self.input_channels;
        for l in 0..self.levels {
            let c = self.channels_at(l);
            plan.push(body(format!("enc{l}.conv1"), ch, c, 3, 1));
            plan.push(body(format!("enc{l}.conv2"), c, c, 3, 1));
            plan.push(body(format!("enc{l}.down"), c, c, 3, 2));
            ch = c;
        }
        let cb = self.channels_at(self.levels);
        plan.push(body("bottleneck.conv1".into(), ch, cb, 3, 1));
        plan.push(body("bottleneck.conv2".into(), cb, cb, 3, 1));
        let mut ch = cb;
        for l in (0..self.levels).rev() {
            let c = self.channels_at(l);
            plan.push(body(
                format!("dec{l}.up"),
                ch,
                c,
                self.upsample_conv_kernel,
                1,
            ));
            plan.push(body(format!("dec{l}.conv1"), 2 * c, c, 3, 1));
            plan.push(body(format!("dec{l}.conv2"), c, c, 3, 1));
            ch = c;
        }
        let head_in = ch + self.input_channels;
        for (head, role) in [
            ("head_mean", LayerRole::MeanHead),
            ("head_logvar", LayerRole::LogVarHead),
        ] {
            plan.push(LayerSpec {
                name: format!("{head}.conv1"),
                in_channels: head_in,
                out_channels: self.base_channels,
                kernel: self.head_kernels[0],
                stride: 1,
                relu: true,
                dropout: false,
                role,
            });
            plan.push(LayerSpec {
                name: format!("{head}.conv2"),
                in_channels: self.base_channels,
                out_channels: 1,
                kernel: self.head_kernels[1],
                stride: 1,
                relu: false,
                dropout: false,
                role,
            });
        }
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Body,
    MeanHead,
    LogVarHead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
    pub dropout: bool,
    pub role: LayerRole,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Train,
    McSample,
    Deterministic,
}

impl ForwardMode {
    pub fn dropout_mode(self) -> DropoutMode {
        match self {
            ForwardMode::Train => DropoutMode::Train,
            ForwardMode::McSample => DropoutMode::McSample,
            ForwardMode::Deterministic => DropoutMode::Off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// All learnable tensors of the network, in [`UNetConfig::layer_plan`]
/// order with the weight of each layer followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T: Real = f32> {
    config: UNetConfig,
    params: Vec<Param<T>>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct HeadOutputs<T: Real> {
    pub y_hat: Tensor<T>,
    pub log_sigma2: Tensor<T>,
}

pub fn build_model<T: Real>(config: &UNetConfig, rng: &mut RngStream) -> Result<NetworkWeights<T>> {
    config.validate()?;
    let mut params = Vec::new();
    for layer in config.layer_plan() {
        let shape = layer.weight_shape();
        let fan_in = layer.in_channels * layer.kernel * layer.kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| invalid!("init distribution: {e}"))?;
        let weight = Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(rng)));
        params.push(Param {
            name: format!("{}.weight", layer.name),
            tensor: weight,
        });
        params.push(Param {
            name: format!("{}.bias", layer.name),
            tensor: Tensor::zeros(&[layer.out_channels]),
        });
    }
    Ok(NetworkWeights {
        config: config.clone(),
        params,
    })
}

impl<T: Real> NetworkWeights<T> {
    /// Assembles weights from named tensors, checking names and shapes
    /// against the layer plan of `config`.
    pub fn from_params(config: UNetConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected: Vec<(String, Vec<usize>)> = config
            .layer_plan()
            .into_iter()
            .flat_map(|l| {
                let w = l.weight_shape().to_vec();
                [
                    (format!("{}.weight", l.name), w),
                    (format!("{}.bias", l.name), vec![l.out_channels]),
                ]
            })
            .collect();
        if expected.len() != params.len() {
            return Err(shape_err!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(shape_err!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.tensor.shape()
                ));
            }
            if !p.tensor.is_finite() {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn cast<U: Real>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels {
            return Err(shape_err!(
                "network expects {} input channels, got {c}",
                self.config.input_channels
            ));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(shape_err!(
                "image extents {h}x{w} must be positive and divisible by 2^levels = {d}"
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`, returning the `(ŷ, log σ̂²)` vars.
    pub fn forward_on_tape<'w>(
        &'w self,
        tape: &mut Tape<'w, T>,
        x: Tensor<T>,
        mode: ForwardMode,
        rng: &mut RngStream,
    ) -> Result<(Var, Var)> {
        self.check_input(&x)?;
        let p = self.config.dropout_rate;
        let dmode = mode.dropout_mode();
        let plan = self.config.layer_plan();
        let slots: Vec<(Var, Var)> = self
            .params
            .chunks_exact(2)
            .enumerate()
            .map(|(i, wb)| {
                (
                    tape.param(2 * i, &wb[0].tensor),
                    tape.param(2 * i + 1, &wb[1].tensor),
                )
            })
            .collect();
        let mut layer = 0;
        let mut apply = |tape: &mut Tape<'w, T>, input: Var, rng: &mut RngStream| -> Result<Var> {
            let spec = &plan[layer];
            let (w, b) = slots[layer];
            layer += 1;
            let mut v = tape.conv2d(input, w, b, spec.stride, spec.kernel / 2)?;
            if !tape.value(v).is_finite() {
                return Err(Error::NonFinite(spec.name.clone()));
            }
            if spec.relu {
                v = tape.relu(v);
            }
            if spec.dropout {
                v = tape.dropout(v, p, dmode, rng)?;
            }
            Ok(v)
        };

        let input = tape.input(x);
        let mut h = input;
        let mut skips = Vec::with_capacity(self.config.levels);
        for _ in 0..self.config.levels {
            h = apply(tape, h, rng)?;
            h = apply(tape, h, rng)?;
            skips.push(h);
            h = apply(tape, h, rng)?;
        }
        h = apply(tape, h, rng)?;
        h = apply(tape, h, rng)?;
        while let Some(skip) = skips.pop() {
            let up = tape.upsample(h, 2)?;
            h = apply(tape, up, rng)?;
            h = tape.concat(h, skip)?;
            h = apply(tape, h, rng)?;
            h = apply(tape, h, rng)?;
        }
        let features = tape.concat(h, input)?;
        let m = apply(tape, features, rng)?;
        let y_hat = apply(tape, m, rng)?;
        let s = apply(tape, features, rng)?;
        let s = apply(tape, s, rng)?;
        let log_sigma2 = tape.clamp(s, T::from_f64(LOG_VAR_MIN), T::from_f64(LOG_VAR_MAX));
        Ok((y_hat, log_sigma2))
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: ForwardMode,
        rng: &mut RngStream,
    ) -> Result<HeadOutputs<T>> {
        let mut tape = Tape::new();
        let (y, s) = self.forward_on_tape(&mut tape, x.clone(), mode, rng)?;
        Ok(HeadOutputs {
            y_hat: tape.value(y).clone(),
            log_sigma2: tape.value(s).clone(),
        })
    }
}
