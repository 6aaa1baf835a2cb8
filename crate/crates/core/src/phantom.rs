//! Procedural paired phantoms.
//!
//! Each phantom is a head-like ellipse made of five tissue classes drawn from
//! one random geometry. The input image uses CT-like constants per class, the
//! target uses a different (injective) per-class mapping with Gaussian noise.
//! A horizontal band across the brain tissue carries elevated target noise
//! and a small additive marker in the input so the noise level is predictable
//! from the input alone.
//!
//! | class      | input | target (normalized) |
//! |------------|-------|---------------------|
//! | background | -1.00 | 0.00                |
//! | skull      |  2.00 | 0.15                |
//! | tissue A   |  0.90 | 0.70                |
//! | tissue B   |  0.70 | 1.00                |
//! | ventricle  |  0.35 | 0.30                |
//!
//! Targets are synthesized in arbitrary scanner units (`target_gain` times the
//! table) and then divided by their tissue-B mean.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, RngStream};
use crate::volume::{Mask, Provenance, Volume, GENERATOR_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueClass {
    Background,
    Skull,
    TissueA,
    TissueB,
    Ventricle,
}

impl TissueClass {
    pub const ALL: [TissueClass; 5] = [
        TissueClass::Background,
        TissueClass::Skull,
        TissueClass::TissueA,
        TissueClass::TissueB,
        TissueClass::Ventricle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// `(height, width)`.
    pub size: (usize, usize),
    /// Input intensity per class, indexed by [`TissueClass::index`].
    pub input_intensity: [f32; 5],
    /// Target intensity per class before the scanner gain.
    pub target_intensity: [f32; 5],
    pub target_gain: f32,
    pub input_noise_std: f32,
    /// Target noise std per class, in normalized units.
    pub target_noise_std: [f32; 5],
    /// Multiplier on the target noise std inside the band.
    pub band_noise_factor: f32,
    /// Added to the input inside the band.
    pub band_input_marker: f32,
    /// Band height as a fraction of the image height.
    pub band_fraction: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: (64, 64),
            input_intensity: [-1.0, 2.0, 0.9, 0.7, 0.35],
            target_intensity: [0.0, 0.15, 0.7, 1.0, 0.3],
            target_gain: 800.0,
            input_noise_std: 0.02,
            target_noise_std: [0.1; 5],
            band_noise_factor: 4.0,
            band_input_marker: 0.25,
            band_fraction: 0.16,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 16 || w < 16 {
            return Err(invalid!("phantom size {h}x{w} below the 16x16 minimum"));
        }
        let stds = self.target_noise_std.iter().chain([&self.input_noise_std]);
        if stds.into_iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(invalid!("noise stds must be finite and >= 0"));
        }
        if !(self.band_noise_factor >= 0.0) || !(0.0..0.5).contains(&self.band_fraction) {
            return Err(invalid!(
                "band factor {} / fraction {} out of range",
                self.band_noise_factor,
                self.band_fraction
            ));
        }
        if self.target_gain <= 0.0 || self.target_intensity[TissueClass::TissueB.index()] <= 0.0 {
            return Err(invalid!(
                "tissue-B target intensity and gain must be positive"
            ));
        }
        Ok(())
    }

    /// Target noise std (normalized units) of one voxel.
    pub fn noise_std(&self, class: TissueClass, in_band: bool) -> f32 {
        let base = self.target_noise_std[class.index()];
        if in_band {
            base * self.band_noise_factor
        } else {
            base
        }
    }
}

/// One generated phantom and its ground-truth geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub input: Volume,
    pub target: Volume,
    pub foreground: Mask,
    pub band: Mask,
    pub labels: Vec<TissueClass>,
}

impl PhantomPair {
    /// Voxels inside the skull ring: tissue A, tissue B and ventricle.
    pub fn brain_mask(&self) -> Mask {
        let brain = self
            .labels
            .iter()
            .map(|&c| {
                matches!(
                    c,
                    TissueClass::TissueA | TissueClass::TissueB | TissueClass::Ventricle
                )
            })
            .collect();
        Mask::new(self.foreground.dims().to_vec(), brain).expect("labels match the image extents")
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.ax).powi(2) + (v / self.ay).powi(2) <= 1.0
    }

    fn shrunk(&self, by: f64) -> Self {
        Self {
            ay: self.ay - by,
            ax: self.ax - by,
            ..*self
        }
    }
}

const MAX_ATTEMPTS: usize = 16;

fn draw_geometry(
    h: usize,
    w: usize,
    band_fraction: f32,
    rng: &mut RngStream,
) -> (Vec<TissueClass>, Vec<bool>) {
    let (hf, wf) = (h as f64, w as f64);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
    let head = Ellipse {
        cy: hf / 2.0 + u(-0.03, 0.03) * hf,
        cx: wf / 2.0 + u(-0.03, 0.03) * wf,
        ay: u(0.36, 0.42) * hf,
        ax: u(0.32, 0.40) * wf,
        angle: u(-0.3, 0.3),
    };
    let brain = head.shrunk(u(2.5, 3.5) * hf / 64.0);
    let scale = u(0.50, 0.65);
    let tissue_b = Ellipse {
        cy: brain.cy + u(-0.03, 0.03) * hf,
        cx: brain.cx + u(-0.03, 0.03) * wf,
        ay: brain.ay * scale,
        ax: brain.ax * scale,
        angle: brain.angle + u(-0.4, 0.4),
    };
    let ventricle = Ellipse {
        cy: brain.cy + u(-0.04, 0.04) * hf,
        cx: brain.cx + u(-0.04, 0.04) * wf,
        ay: u(0.08, 0.12) * hf,
        ax: u(0.04, 0.07) * wf,
        angle: u(-0.5, 0.5),
    };
    let band_h = (band_fraction as f64 * hf).round();
    let band_top = u(
        brain.cy - brain.ay * 0.8,
        brain.cy + brain.ay * 0.8 - band_h,
    )
    .round();

    let mut labels = Vec::with_capacity(h * w);
    let mut band = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let class = if !head.contains(y, x) {
                TissueClass::Background
            } else if !brain.contains(y, x) {
                TissueClass::Skull
            } else if ventricle.contains(y, x) {
                TissueClass::Ventricle
            } else if tissue_b.contains(y, x) {
                TissueClass::TissueB
            } else {
                TissueClass::TissueA
            };
            let in_rows = (r as f64) >= band_top && (r as f64) < band_top + band_h;
            band.push(in_rows && matches!(class, TissueClass::TissueA | TissueClass::TissueB));
            labels.push(class);
        }
    }
    (labels, band)
}

fn geometry_ok(labels: &[TissueClass], band: &[bool], h: usize, w: usize) -> bool {
    let present = TissueClass::ALL.iter().all(|c| labels.contains(c));
    let border_clear = (0..h).all(|r| {
        (0..w).all(|c| {
            let on_border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            !on_border || labels[r * w + c] == TissueClass::Background
        })
    });
    present && border_clear && band.iter().any(|&b| b)
}

/// Generates one paired phantom; identical `(spec, seed)` give identical output.
pub fn generate_phantom_pair(spec: &PhantomSpec, rng: &mut RngStream) -> Result<PhantomPair> {
    spec.validate()?;
    let (h, w) = spec.size;
    let seed = rng.seed();
    let mut geometry = None;
    for _ in 0..MAX_ATTEMPTS {
        let (labels, band) = draw_geometry(h, w, spec.band_fraction, rng);
        if geometry_ok(&labels, &band, h, w) {
            geometry = Some((labels, band));
            break;
        }
    }
    let (labels, band) = geometry.ok_or_else(|| {
        invalid!("could not draw a phantom with every tissue class in {MAX_ATTEMPTS} attempts")
    })?;

    let std_normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut input = Vec::with_capacity(h * w);
    let mut raw_target = Vec::with_capacity(h * w);
    for (&class, &in_band) in labels.iter().zip(&band) {
        let k = class.index();
        let marker = if in_band { spec.band_input_marker } else { 0.0 };
        let ni = std_normal.sample(rng) as f32 * spec.input_noise_std;
        input.push(spec.input_intensity[k] + marker + ni);
        let nt = std_normal.sample(rng) as f32 * spec.noise_std(class, in_band);
        raw_target.push(spec.target_gain * (spec.target_intensity[k] + nt));
    }

    let provenance = Provenance {
        seed,
        generator: GENERATOR_VERSION.to_string(),
    };
    let dims = vec![h, w];
    let tissue_b = Mask::new(
        dims.clone(),
        labels.iter().map(|&c| c == TissueClass::TissueB).collect(),
    )?;
    let raw_target = Volume::new(dims.clone(), raw_target)?;
    let target = normalize_tissue_mean(&raw_target, &tissue_b)?.with_provenance(provenance.clone());
    let input = Volume::new(dims.clone(), input)?.with_provenance(provenance);
    let foreground = Mask::new(
        dims.clone(),
        labels
            .iter()
            .map(|&c| c != TissueClass::Background)
            .collect(),
    )?;
    let band = Mask::new(dims, band)?;
    Ok(PhantomPair {
        input,
        target,
        foreground,
        band,
        labels,
    })
}

/// Divides every voxel by the mean over `tissue_mask`.
pub fn normalize_tissue_mean(volume: &Volume, tissue_mask: &Mask) -> Result<Volume> {
    if volume.dims() != tissue_mask.dims() {
        return Err(Error::Shape(format!(
            "volume {:?} vs mask {:?}",
            volume.dims(),
            tissue_mask.dims()
        )));
    }
    let n = tissue_mask.count();
    if n == 0 {
        return Err(invalid!("tissue mask is empty"));
    }
    let sum: f64 = volume
        .data()
        .iter()
        .zip(tissue_mask.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .sum();
    let mean = sum / n as f64;
    if !mean.is_finite() || mean.abs() < 1e-12 {
        return Err(invalid!(
            "tissue mean {mean} is too close to zero to normalize by"
        ));
    }
    let mut out = volume.clone();
    for v in out.data_mut() {
        *v = (*v as f64 / mean) as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub role: Role,
    /// Position in the generation sequence; validation follows training.
    pub index: u64,
    pub seed: u64,
    pub input: Volume,
    pub target: Volume,
    pub foreground: Mask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.role == Role::Train)
    }

    pub fn validation(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.role == Role::Validation)
    }
}

/// Seed of the phantom at `index` in a dataset rooted at `seed`.
pub fn phantom_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, "phantom", index)
}

/// Regenerates the full phantom (including band and labels) for one index.
pub fn phantom_at(spec: &PhantomSpec, seed: u64, index: u64) -> Result<PhantomPair> {
    generate_phantom_pair(spec, &mut RngStream::new(phantom_seed(seed, index)))
}

/// `n_train` training phantoms (indices `0..n_train`) followed by `n_val`
/// validation phantoms.
pub fn build_dataset(
    n_train: usize,
    n_val: usize,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 {
        return Err(invalid!(
            "dataset needs at least one training and one validation phantom (got {n_train}, {n_val})"
        ));
    }
    let samples = (0..(n_train + n_val) as u64)
        .map(|index| {
            let role = if index < n_train as u64 {
                Role::Train
            } else {
                Role::Validation
            };
            let pair = phantom_at(spec, seed, index)?;
            Ok(Sample {
                role,
                index,
                seed: phantom_seed(seed, index),
                input: pair.input,
                target: pair.target,
                foreground: pair.foreground,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}
