//! Differentiable layer primitives on `[N, C, H, W]` tensors.
//!
//! Each forward op has a matching `*_grad` that maps an upstream gradient
//! (shaped like the forward output) back onto the op's inputs.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::real::{gemm, Layout, Real};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (f, kc, kh, kw) = kernel.dims4()?;
        if kc != c {
            return Err(shape_err!(
                "conv2d: input has {c} channels but kernel {:?} expects {kc}",
                kernel.shape()
            ));
        }
        if bias.shape() != [f] {
            return Err(shape_err!(
                "conv2d: bias shape {:?} does not match {f} filters",
                bias.shape()
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv2d: kernel extents {kh}x{kw} must be odd"));
        }
        if stride == 0 {
            return Err(invalid!("conv2d: stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.w + p <= kj {
            0
        } else {
            ((self.w + p - kj - 1) / s + 1).min(self.wo)
        };
        (lo, hi.max(lo))
    }

    fn src_row(&self, oy: usize, ki: usize) -> Option<usize> {
        (oy * self.stride + ki)
            .checked_sub(self.pad)
            .filter(|&iy| iy < self.h)
    }
}

/// Unrolls one sample into the `[C·kh·kw, Ho·Wo]` patch matrix.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.col_range(kj);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src_row(oy, ki) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            line[..lo].fill(T::zero());
                            line[hi..].fill(T::zero());
                            let base = iy * g.w + kj;
                            for ox in lo..hi {
                                line[ox] = src[base + ox * g.stride - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input plane.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.col_range(kj);
                for oy in 0..g.ho {
                    if let Some(iy) = g.src_row(oy, ki) {
                        let base = iy * g.w + kj;
                        let line = &src[oy * g.wo..(oy + 1) * g.wo];
                        for ox in lo..hi {
                            let idx = base + ox * g.stride - g.pad;
                            dst[idx] = dst[idx] + line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2D cross-correlation.
///
/// `input` is `[N, C, H, W]`, `kernel` is `[F, C, kH, kW]` with odd extents,
/// `bias` is `[F]`. The output is `[N, F, H', W']` with
/// `H' = (H + 2·padding − kH) / stride + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, bias, stride, padding)?;
    let plane = g.out_plane();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.f * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for ni in 0..g.n {
        let x = &input.data()[ni * in_len..(ni + 1) * in_len];
        let y = &mut out[ni * g.f * plane..(ni + 1) * g.f * plane];
        for (fi, &b) in bias.data().iter().enumerate() {
            y[fi * plane..(fi + 1) * plane].fill(b);
        }
        let patches: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut cols);
            &cols
        };
        gemm(
            g.f,
            g.patch_len(),
            plane,
            kernel.data(),
            Layout::Normal,
            patches,
            Layout::Normal,
            T::one(),
            y,
        );
    }
    Tensor::new(vec![g.n, g.f, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to each of its inputs.
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Real> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_grad<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    upstream: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::new(input, kernel, bias, stride, padding)?;
    if upstream.shape() != [g.n, g.f, g.ho, g.wo] {
        return Err(shape_err!(
            "conv2d_grad: upstream {:?} does not match forward output {:?}",
            upstream.shape(),
            [g.n, g.f, g.ho, g.wo]
        ));
    }
    let plane = g.out_plane();
    let in_len = g.c * g.h * g.w;
    let patch = g.patch_len();

    let mut grad_bias = vec![T::zero(); g.f];
    for ni in 0..g.n {
        for (fi, gb) in grad_bias.iter_mut().enumerate() {
            let start = (ni * g.f + fi) * plane;
            let s = upstream.data()[start..start + plane]
                .iter()
                .fold(0.0f64, |acc, v| acc + v.as_f64());
            *gb = *gb + T::from_f64(s);
        }
    }

    let mut grad_kernel = vec![T::zero(); g.f * patch];
    let mut grad_input = vec![T::zero(); g.n * in_len];
    let mut cols = vec![T::zero(); patch * plane];
    let mut grad_cols = vec![T::zero(); patch * plane];
    for ni in 0..g.n {
        let x = &input.data()[ni * in_len..(ni + 1) * in_len];
        let up = &upstream.data()[ni * g.f * plane..(ni + 1) * g.f * plane];
        let patches: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut cols);
            &cols
        };
        // dK[F, P] += dY[F, HW] · patchesᵀ
        gemm(
            g.f,
            plane,
            patch,
            up,
            Layout::Normal,
            patches,
            Layout::Transposed,
            T::one(),
            &mut grad_kernel,
        );
        let gx = &mut grad_input[ni * in_len..(ni + 1) * in_len];
        if g.is_pointwise() {
            // dX[C, HW] = Kᵀ · dY
            gemm(
                patch,
                g.f,
                plane,
                kernel.data(),
                Layout::Transposed,
                up,
                Layout::Normal,
                T::zero(),
                gx,
            );
        } else {
            gemm(
                patch,
                g.f,
                plane,
                kernel.data(),
                Layout::Transposed,
                up,
                Layout::Normal,
                T::zero(),
                &mut grad_cols,
            );
            col2im(&g, &grad_cols, gx);
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), grad_input)?,
        kernel: Tensor::new(kernel.shape().to_vec(), grad_kernel)?,
        bias: Tensor::new(vec![g.f], grad_bias)?,
    })
}

/// Nearest-neighbour upsampling: `out[n, c, i, j] = in[n, c, i / f, j / f]`.
pub fn nearest_upsample<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 {
        return Err(invalid!("upsample factor must be at least 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for i in 0..oh {
            let row = &plane[(i / factor) * w..(i / factor + 1) * w];
            for j in 0..ow {
                out.push(row[j / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn nearest_upsample_grad<T: Real>(upstream: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = upstream.dims4()?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(shape_err!(
            "upsample gradient {:?} is not a multiple of factor {factor}",
            upstream.shape()
        ));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); n * c * h * w];
    for (src, dst) in upstream
        .data()
        .chunks_exact(oh * ow)
        .zip(out.chunks_exact_mut(h * w))
    {
        for i in 0..oh {
            for j in 0..ow {
                let d = &mut dst[(i / factor) * w + j / factor];
                *d = *d + src[i * ow + j];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// When dropout masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Train,
    McSample,
    Off,
}

/// Per-`(n, c)` channel multipliers: either `0` or `1 / (1 − p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask<T: Real> {
    plane: usize,
    scales: Vec<T>,
}

impl<T: Real> ChannelMask<T> {
    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn apply(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if t.len() != self.scales.len() * self.plane {
            return Err(shape_err!(
                "dropout mask covers {} channels of {} voxels, tensor {:?}",
                self.scales.len(),
                self.plane,
                t.shape()
            ));
        }
        let mut out = t.clone();
        for (chunk, &s) in out
            .data_mut()
            .chunks_exact_mut(self.plane)
            .zip(&self.scales)
        {
            for v in chunk {
                *v = *v * s;
            }
        }
        Ok(out)
    }
}

/// Spatial (channel-wise) inverted dropout.
///
/// In `Train` and `McSample` modes each `(n, c)` feature map is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 − p)`. Returns the
/// mask that was applied, or `None` when the op reduced to the identity.
pub fn spatial_dropout<T: Real>(
    input: &Tensor<T>,
    p: f64,
    mode: DropoutMode,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, Option<ChannelMask<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid!("dropout rate {p} outside [0, 1)"));
    }
    let (n, c, h, w) = input.dims4()?;
    if mode == DropoutMode::Off || p == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let scales = (0..n * c)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect();
    let mask = ChannelMask {
        plane: h * w,
        scales,
    };
    let out = mask.apply(input)?;
    Ok((out, Some(mask)))
}

pub fn spatial_dropout_grad<T: Real>(
    mask: Option<&ChannelMask<T>>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    match mask {
        Some(m) => m.apply(upstream),
        None => Ok(upstream.clone()),
    }
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`]; the derivative at exactly zero is taken as zero.
pub fn relu_grad<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(shape_err!(
            "relu_grad: input {:?} vs upstream {:?}",
            input.shape(),
            upstream.shape()
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(shape_err!(
            "concat_channels: {:?} and {:?} disagree outside the channel axis",
            a.shape(),
            b.shape()
        ));
    }
    let (sa, sb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for ni in 0..na {
        out.extend_from_slice(&a.data()[ni * sa..(ni + 1) * sa]);
        out.extend_from_slice(&b.data()[ni * sb..(ni + 1) * sb]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], out)
}

/// Splits a concatenated gradient back into its `(a, b)` parts.
pub fn split_channels<T: Real>(
    upstream: &Tensor<T>,
    channels_a: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = upstream.dims4()?;
    if channels_a > c {
        return Err(shape_err!(
            "split_channels: {channels_a} leading channels requested from {c}"
        ));
    }
    let cb = c - channels_a;
    let (sa, sb) = (channels_a * h * w, cb * h * w);
    let mut ga = Vec::with_capacity(n * sa);
    let mut gb = Vec::with_capacity(n * sb);
    for chunk in upstream.data().chunks_exact((sa + sb).max(1)).take(n) {
        ga.extend_from_slice(&chunk[..sa]);
        gb.extend_from_slice(&chunk[sa..]);
    }
    Ok((
        Tensor::new(vec![n, channels_a, h, w], ga)?,
        Tensor::new(vec![n, cb, h, w], gb)?,
    ))
}

/// Elementwise clamp to `[lo, hi]`.
pub fn clamp<T: Real>(input: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    input.map(|v| v.max(lo).min(hi))
}

/// Gradient of [`clamp`]: passes through strictly inside the interval.
pub fn clamp_grad<T: Real>(
    input: &Tensor<T>,
    lo: T,
    hi: T,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(shape_err!(
            "clamp_grad: input {:?} vs upstream {:?}",
            input.shape(),
            upstream.shape()
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > lo && x < hi { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f32>::from_fn(&[2, 1, 5, 4], |i| (i as f32).sin());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |i| i as f32);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        for (fi, plane) in y.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[fi]));
        }
    }

    #[test]
    fn strided_output_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 6]);
        let y = conv2d(
            &x,
            &Tensor::zeros(&[4, 1, 3, 3]),
            &Tensor::zeros(&[4]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(y.shape(), [1, 4, 4, 3]);
        let y = conv2d(
            &x,
            &Tensor::zeros(&[1, 1, 5, 5]),
            &Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 2]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let err = conv2d(
            &x,
            &Tensor::zeros(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[1, 2, 2, 2]),
            &Tensor::zeros(&[1]),
            1,
            1
        )
        .is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[1, 2, 7, 7]),
            &Tensor::zeros(&[1]),
            1,
            1
        )
        .is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[1, 2, 3, 3]),
            &Tensor::zeros(&[2]),
            1,
            1
        )
        .is_err());
    }

    #[test]
    fn conv_grad_zero_upstream() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |i| i as f32 * 0.1);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f32 * 0.01);
        let b = Tensor::zeros(&[3]);
        let g = conv2d_grad(&x, &k, &b, 1, 1, &Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
        assert!(conv2d_grad(&x, &k, &b, 1, 1, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
    }

    #[test]
    fn conv_grad_identity_kernel() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 4, 5], |i| i as f32);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let up = Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f32).cos());
        let g = conv2d_grad(&x, &k, &Tensor::zeros(&[1]), 1, 1, &up).unwrap();
        assert_eq!(g.input, up);
    }

    #[test]
    fn upsample_cases() {
        let x = t4([1, 1, 1, 2], vec![1.0, 2.0]);
        assert_eq!(nearest_upsample(&x, 1).unwrap(), x);
        let y = nearest_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 4]);
        assert_eq!(y.data(), [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = nearest_upsample_grad(&Tensor::full(&[1, 1, 2, 4], 1.0f32), 2).unwrap();
        assert_eq!(g.data(), [4.0, 4.0]);
        assert!(nearest_upsample(&x, 0).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32 + 1.0);
        let mut rng = RngStream::new(1);
        for mode in [DropoutMode::Train, DropoutMode::McSample, DropoutMode::Off] {
            assert_eq!(spatial_dropout(&x, 0.0, mode, &mut rng).unwrap().0, x);
        }
        assert_eq!(
            spatial_dropout(&x, 0.5, DropoutMode::Off, &mut rng)
                .unwrap()
                .0,
            x
        );
        assert!(spatial_dropout(&x, 1.0, DropoutMode::Train, &mut rng).is_err());
        assert!(spatial_dropout(&x, -0.1, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_whole_channel() {
        let x = Tensor::<f32>::from_fn(&[4, 8, 3, 3], |i| i as f32 + 1.0);
        let mut rng = RngStream::new(5);
        let (y, mask) = spatial_dropout(&x, 0.5, DropoutMode::Train, &mut rng).unwrap();
        assert!(mask.is_some());
        for (xs, ys) in x.data().chunks(9).zip(y.data().chunks(9)) {
            let dropped = ys.iter().all(|&v| v == 0.0);
            let doubled = xs.iter().zip(ys).all(|(&a, &b)| b == 2.0 * a);
            assert!(dropped ^ doubled);
        }
    }

    #[test]
    fn dropout_rate_statistics() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let mut rng = RngStream::new(2024);
        let trials = 10_000;
        let zeroed = (0..trials)
            .filter(|_| {
                let (y, _) = spatial_dropout(&x, 0.5, DropoutMode::Train, &mut rng).unwrap();
                y.data()[0] == 0.0
            })
            .count();
        let frac = zeroed as f64 / trials as f64;
        assert!((frac - 0.5).abs() <= 0.02, "zeroed fraction {frac}");
    }

    #[test]
    fn dropout_replays_with_seed() {
        let x = Tensor::<f32>::from_fn(&[2, 6, 2, 2], |i| i as f32);
        let a = spatial_dropout(&x, 0.3, DropoutMode::McSample, &mut RngStream::new(9))
            .unwrap()
            .0;
        let b = spatial_dropout(&x, 0.3, DropoutMode::McSample, &mut RngStream::new(9))
            .unwrap()
            .0;
        assert_eq!(a, b);
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), [0.0, 0.0, 2.0]);
        let neg = Tensor::<f32>::full(&[4], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::<f32>::from_fn(&[4], |i| i as f32 + 0.5);
        assert_eq!(relu(&pos), pos);
        let g = relu_grad(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_cases() {
        let a = t4([1, 1, 1, 2], vec![1.0, 2.0]);
        let b = t4([1, 1, 1, 2], vec![3.0, 4.0]);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.data(), [1.0, 2.0, 3.0, 4.0]);
        let empty = Tensor::<f32>::zeros(&[1, 0, 1, 2]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let (ga, gb) = split_channels(&ab, 1).unwrap();
        assert_eq!((ga, gb), (a.clone(), b));
        assert!(concat_channels(&a, &Tensor::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn clamp_bounds() {
        let x = Tensor::<f32>::new(vec![3], vec![-20.0, 0.5, 20.0]).unwrap();
        assert_eq!(clamp(&x, -10.0, 10.0).data(), [-10.0, 0.5, 10.0]);
        let g = clamp_grad(&x, -10.0, 10.0, &Tensor::full(&[3], 2.0)).unwrap();
        assert_eq!(g.data(), [0.0, 2.0, 0.0]);
    }
}
