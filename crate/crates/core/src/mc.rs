//! Monte Carlo dropout prediction.
//!
//! For `T` stochastic passes with outputs `(ŷ_t, σ̂²_t)` the per-voxel
//! predictive variance splits into
//!
//! ```text
//! aleatoric = 1/T · Σ σ̂²_t
//! epistemic = 1/T · Σ ŷ_t² − (1/T · Σ ŷ_t)²
//! ```
//!
//! The epistemic term is evaluated in the algebraically equal two-pass form
//! `1/T · Σ (ŷ_t − mean)²` in f64 so it never goes negative through
//! cancellation. The scibilic map is `epistemic / (aleatoric + ε)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::unet::{ForwardMode, NetworkWeights};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    /// Number of stochastic forward passes `T`.
    pub samples: usize,
    /// Not part of the serialized form; callers derive it from a run seed.
    #[serde(skip)]
    pub seed: u64,
    pub scibilic_epsilon: f64,
    /// Maximum tile extents for segmented inference.
    pub segment_tile: (usize, usize),
    /// Overlap between neighbouring tiles, in voxels (even).
    pub segment_overlap: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            seed: 0,
            scibilic_epsilon: 1e-6,
            segment_tile: (64, 64),
            segment_overlap: 16,
        }
    }
}

/// Anything that can produce one stochastic `(ŷ, σ̂²)` sample.
pub trait Predictor {
    /// Spatial extents passed to [`Predictor::sample`] must be multiples of this.
    fn divisor(&self) -> usize;

    /// One pass on a `[1, C, H, W]` input, returning `ŷ` and `σ̂²`.
    fn sample(&self, x: &Tensor<f32>, rng: &mut RngStream) -> Result<(Tensor<f32>, Tensor<f32>)>;
}

impl Predictor for NetworkWeights<f32> {
    fn divisor(&self) -> usize {
        self.config().divisor()
    }

    fn sample(&self, x: &Tensor<f32>, rng: &mut RngStream) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let out = self.forward(x, ForwardMode::McSample, rng)?;
        Ok((out.y_hat, out.log_sigma2.map(f32::exp)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveOutput {
    pub mean: Volume,
    pub epistemic: Volume,
    pub aleatoric: Volume,
    pub scibilic: Volume,
    pub samples: usize,
}

/// Reduces per-sample maps into the predictive moments. `y_hats[t]` and
/// `sigma2s[t]` hold sample `t`, each of length `prod(dims)`.
pub fn decompose<Y: AsRef<[f32]>, S: AsRef<[f32]>>(
    dims: &[usize],
    y_hats: &[Y],
    sigma2s: &[S],
    epsilon: f64,
) -> Result<PredictiveOutput> {
    let t = y_hats.len();
    if t == 0 || t != sigma2s.len() {
        return Err(invalid!(
            "need the same positive number of mean and variance samples, got {t} and {}",
            sigma2s.len()
        ));
    }
    let len: usize = dims.iter().product();
    if y_hats.iter().any(|y| y.as_ref().len() != len)
        || sigma2s.iter().any(|s| s.as_ref().len() != len)
    {
        return Err(shape_err!("sample maps do not match extents {dims:?}"));
    }
    let tf = t as f64;
    let mut mean = vec![0.0f64; len];
    let mut aleatoric = vec![0.0f64; len];
    for (y, s) in y_hats.iter().zip(sigma2s) {
        for ((m, a), (&yv, &sv)) in mean
            .iter_mut()
            .zip(aleatoric.iter_mut())
            .zip(y.as_ref().iter().zip(s.as_ref()))
        {
            *m += yv as f64;
            *a += sv as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= tf);
    aleatoric.iter_mut().for_each(|a| *a /= tf);
    let mut epistemic = vec![0.0f64; len];
    for y in y_hats {
        for ((e, &m), &yv) in epistemic.iter_mut().zip(&mean).zip(y.as_ref()) {
            let d = yv as f64 - m;
            *e += d * d;
        }
    }
    epistemic.iter_mut().for_each(|e| *e /= tf);

    let to_volume =
        |v: Vec<f64>| Volume::new(dims.to_vec(), v.into_iter().map(|x| x as f32).collect());
    let epistemic = to_volume(epistemic)?;
    let aleatoric = to_volume(aleatoric)?;
    let scibilic = scibilic_map(&epistemic, &aleatoric, epsilon)?;
    Ok(PredictiveOutput {
        mean: to_volume(mean)?,
        epistemic,
        aleatoric,
        scibilic,
        samples: t,
    })
}

/// Voxel-wise `epistemic / (aleatoric + epsilon)`.
pub fn scibilic_map(epistemic: &Volume, aleatoric: &Volume, epsilon: f64) -> Result<Volume> {
    epistemic.same_dims(aleatoric)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(invalid!("epsilon {epsilon} must be finite and >= 0"));
    }
    let data = epistemic
        .data()
        .iter()
        .zip(aleatoric.data())
        .map(|(&e, &a)| {
            if !(e >= 0.0 && a >= 0.0) || !e.is_finite() || !a.is_finite() {
                return Err(invalid!(
                    "uncertainty maps must be finite and nonnegative (got {e}, {a})"
                ));
            }
            let denom = a as f64 + epsilon;
            if denom <= 0.0 {
                return Err(invalid!("zero aleatoric variance with epsilon 0"));
            }
            Ok((e as f64 / denom) as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::new(epistemic.dims().to_vec(), data)
}

/// `T` passes in MC-sample mode; pass `t` draws its dropout masks from the
/// stream derived as `(seed, "mc", t)`.
pub fn mc_predict<P: Predictor + ?Sized>(
    predictor: &P,
    x: &Volume,
    config: &McConfig,
) -> Result<PredictiveOutput> {
    if config.samples == 0 {
        return Err(invalid!("MC sample count T must be >= 1"));
    }
    let input = x.to_tensor()?;
    let root = RngStream::new(config.seed);
    let mut y_hats = Vec::with_capacity(config.samples);
    let mut sigma2s = Vec::with_capacity(config.samples);
    for t in 0..config.samples {
        let mut rng = root.derive_indexed("mc", t as u64);
        let (y, s) = predictor.sample(&input, &mut rng)?;
        if y.len() != x.len() || s.len() != x.len() {
            return Err(shape_err!(
                "predictor returned {:?}/{:?} for a {:?} input",
                y.shape(),
                s.shape(),
                x.dims()
            ));
        }
        y_hats.push(y.into_data());
        sigma2s.push(s.into_data());
    }
    decompose(x.dims(), &y_hats, &sigma2s, config.scibilic_epsilon)
}

/// One tile of a segmented run: the window fed to the network and the
/// sub-window of it whose outputs are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Kept rows `[own_rows.0, own_rows.1)` in volume coordinates.
    pub own_rows: (usize, usize),
    pub own_cols: (usize, usize),
}

/// Tile starts along one axis. The stride is a multiple of `divisor` so the
/// network's downsampling grid lines up between tiles; only a final tile
/// flushed against an indivisible edge can be off-grid.
fn axis_starts(size: usize, tile: usize, overlap: usize, divisor: usize) -> Vec<usize> {
    if tile >= size {
        return vec![0];
    }
    let stride = ((tile - overlap) / divisor * divisor).max(divisor);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + tile < size)
        .collect();
    starts.push(size - tile);
    starts.dedup();
    starts
}

/// Owned interval per tile: neighbours split their overlap at its midpoint.
fn axis_ownership(size: usize, tile: usize, starts: &[usize]) -> Vec<(usize, usize)> {
    let cuts: Vec<usize> = starts
        .windows(2)
        .map(|p| (p[1] + p[0] + tile) / 2)
        .collect();
    (0..starts.len())
        .map(|i| {
            let lo = if i == 0 { 0 } else { cuts[i - 1] };
            let hi = if i + 1 == starts.len() { size } else { cuts[i] };
            (lo, hi)
        })
        .collect()
}

fn fit_tile(size: usize, max_tile: usize, divisor: usize) -> Result<usize> {
    let t = max_tile.min(size) / divisor * divisor;
    if t == 0 {
        return Err(invalid!(
            "extent {size} (max tile {max_tile}) cannot hold a tile divisible by {divisor}"
        ));
    }
    Ok(t)
}

/// Lays out overlapping tiles over an `h×w` image. Tile extents are the
/// configured maxima shrunk to a multiple of `divisor` that fits.
pub fn plan_segments(
    h: usize,
    w: usize,
    config: &McConfig,
    divisor: usize,
) -> Result<Vec<Segment>> {
    let overlap = config.segment_overlap;
    if overlap % 2 != 0 {
        return Err(invalid!("segment overlap {overlap} must be even"));
    }
    let th = fit_tile(h, config.segment_tile.0, divisor)?;
    let tw = fit_tile(w, config.segment_tile.1, divisor)?;
    if (th < h && overlap >= th) || (tw < w && overlap >= tw) {
        return Err(invalid!(
            "segment overlap {overlap} is not smaller than the {th}x{tw} tile"
        ));
    }
    let rows = axis_starts(h, th, overlap, divisor);
    let cols = axis_starts(w, tw, overlap, divisor);
    let own_r = axis_ownership(h, th, &rows);
    let own_c = axis_ownership(w, tw, &cols);
    let mut segments = Vec::with_capacity(rows.len() * cols.len());
    for (&top, &own_rows) in rows.iter().zip(&own_r) {
        for (&left, &own_cols) in cols.iter().zip(&own_c) {
            segments.push(Segment {
                top,
                left,
                height: th,
                width: tw,
                own_rows,
                own_cols,
            });
        }
    }
    Ok(segments)
}

/// MC prediction over overlapping tiles, keeping each tile's owned interior.
pub fn segmented_inference<P: Predictor + ?Sized>(
    predictor: &P,
    x: &Volume,
    config: &McConfig,
) -> Result<PredictiveOutput> {
    if config.samples == 0 {
        return Err(invalid!("MC sample count T must be >= 1"));
    }
    let (h, w) = x.hw()?;
    let segments = plan_segments(h, w, config, predictor.divisor())?;
    let mut maps = [
        vec![0.0f32; h * w],
        vec![0.0; h * w],
        vec![0.0; h * w],
        vec![0.0; h * w],
    ];
    for seg in &segments {
        let tile = x.crop(seg.top, seg.left, seg.height, seg.width)?;
        let out = mc_predict(predictor, &tile, config)?;
        let sources = [&out.mean, &out.epistemic, &out.aleatoric, &out.scibilic];
        for (dst, src) in maps.iter_mut().zip(sources) {
            for r in seg.own_rows.0..seg.own_rows.1 {
                for c in seg.own_cols.0..seg.own_cols.1 {
                    dst[r * w + c] = src.data()[(r - seg.top) * seg.width + (c - seg.left)];
                }
            }
        }
    }
    let [mean, epistemic, aleatoric, scibilic] = maps.map(|m| Volume::new(vec![h, w], m));
    Ok(PredictiveOutput {
        mean: mean?,
        epistemic: epistemic?,
        aleatoric: aleatoric?,
        scibilic: scibilic?,
        samples: config.samples,
    })
}
