//! Synthetic-anomaly evaluation: insertion, binarization, overlap scores,
//! detection rates and percentile-bootstrap confidence intervals.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;
use crate::volume::{Mask, Volume};

/// Binarization threshold used for detection.
pub const DETECTION_BINARIZATION: f64 = 0.15;
/// IoU at which a per-case score counts as a detection.
pub const DETECTION_IOU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyInstance {
    pub corrupted: Volume,
    pub truth_mask: Mask,
    /// `(top, left)` of the square.
    pub placement: (usize, usize),
    pub side: usize,
}

/// Every `(top, left)` where a `side×side` square lies inside `foreground`.
pub fn valid_placements(foreground: &Mask, side: usize) -> Result<Vec<(usize, usize)>> {
    let (h, w) = foreground.hw()?;
    if side == 0 || side > h || side > w {
        return Ok(Vec::new());
    }
    // Summed-area table of foreground voxels.
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            sat[(r + 1) * (w + 1) + c + 1] = foreground.data()[r * w + c] as u32
                + sat[r * (w + 1) + c + 1]
                + sat[(r + 1) * (w + 1) + c]
                - sat[r * (w + 1) + c];
        }
    }
    let full = (side * side) as u32;
    let mut out = Vec::new();
    for r in 0..=h - side {
        for c in 0..=w - side {
            let (r1, c1) = (r + side, c + side);
            let s = sat[r1 * (w + 1) + c1] + sat[r * (w + 1) + c]
                - sat[r * (w + 1) + c1]
                - sat[r1 * (w + 1) + c];
            if s == full {
                out.push((r, c));
            }
        }
    }
    Ok(out)
}

/// Zeroes a `side×side` square placed uniformly among the positions that lie
/// fully inside `foreground`.
pub fn insert_anomaly(
    source: &Volume,
    foreground: &Mask,
    side: usize,
    rng: &mut RngStream,
) -> Result<AnomalyInstance> {
    let (h, w) = source.hw()?;
    if foreground.dims() != source.dims() {
        return Err(Error::Shape(format!(
            "foreground {:?} vs source {:?}",
            foreground.dims(),
            source.dims()
        )));
    }
    let options = valid_placements(foreground, side)?;
    if options.is_empty() {
        return Err(Error::NoPlacement(format!(
            "no {side}x{side} square fits entirely inside the foreground of a {h}x{w} image"
        )));
    }
    let (top, left) = options[rng.below(options.len())];
    let mut corrupted = source.clone();
    let mut truth = Mask::empty(&[h, w]);
    for r in top..top + side {
        for c in left..left + side {
            corrupted.data_mut()[r * w + c] = 0.0;
            truth.data_mut()[r * w + c] = true;
        }
    }
    Ok(AnomalyInstance {
        corrupted,
        truth_mask: truth,
        placement: (top, left),
        side,
    })
}

/// Rescales a map to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Volume) -> Volume {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let range = (hi - lo) as f64;
    let mut out = map.clone();
    for v in out.data_mut() {
        *v = if range > 0.0 {
            ((*v - lo) as f64 / range) as f32
        } else {
            0.0
        };
    }
    out
}

/// Labels 4-connected components of `mask`; returns `(labels, sizes)` with
/// label 0 meaning background and component `k` stored as label `k + 1`.
pub fn connected_components(mask: &Mask) -> Result<(Vec<u32>, Vec<usize>)> {
    let (h, w) = mask.hw()?;
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    Ok((labels, sizes))
}

/// Voxels `>= threshold`, reduced to their largest 4-connected component
/// (ties go to the component met first in raster order).
pub fn binarize_largest_component(map: &Volume, threshold: f64) -> Result<Mask> {
    let candidates = Mask::new(
        map.dims().to_vec(),
        map.data().iter().map(|&v| v as f64 >= threshold).collect(),
    )?;
    let (labels, sizes) = connected_components(&candidates)?;
    let Some((best, _)) = sizes.iter().enumerate().rev().max_by_key(|&(_, s)| *s) else {
        return Ok(Mask::empty(map.dims()));
    };
    let keep = best as u32 + 1;
    Mask::new(
        map.dims().to_vec(),
        labels.iter().map(|&l| l == keep).collect(),
    )
}

fn overlap_counts(a: &Mask, b: &Mask) -> Result<(usize, usize, usize)> {
    a.same_dims(b)?;
    let inter = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| x && y)
        .count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Fraction of `(prediction, truth)` cases whose IoU reaches `iou_threshold`.
pub fn detection_rate(cases: &[(Mask, Mask)], iou_threshold: f64) -> Result<f64> {
    if cases.is_empty() {
        return Err(invalid!("detection rate over zero cases"));
    }
    let hits = cases
        .iter()
        .map(|(p, t)| iou(p, t).map(|v| v >= iou_threshold))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&d| d)
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of the mean: `resamples` with-replacement draws of
/// size `n`, returning the `(1 − level)/2` and `(1 + level)/2` quantiles of
/// the resampled means.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid!("bootstrap over zero values"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid!("confidence level {level} outside (0, 1)"));
    }
    if resamples == 0 {
        return Err(invalid!("bootstrap needs at least one resample"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("bootstrap over non-finite values"));
    }
    let n = values.len();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // A mean lies within the data's range; clamping removes summation
    // round-off, so constant data gives exactly `(c, c)`.
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| ((0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64).clamp(lo, hi))
        .collect();
    means.sort_by(f64::total_cmp);
    Ok((
        quantile(&means, (1.0 - level) / 2.0),
        quantile(&means, (1.0 + level) / 2.0),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CiConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for CiConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// One point of a curve with its bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    /// Dice and IoU of the largest component at the detection binarization.
    pub dice: f64,
    pub iou: f64,
    /// `iou >= DETECTION_IOU`.
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dice_curve: Vec<CurvePoint>,
    pub detection_curve: Vec<CurvePoint>,
    pub cases: Vec<CaseScore>,
}

impl EvalReport {
    /// Curve point with the highest mean Dice (first on ties).
    pub fn best_dice(&self) -> Option<&CurvePoint> {
        self.dice_curve
            .iter()
            .reduce(|best, p| if p.value > best.value { p } else { best })
    }

    pub fn detection_at(&self, iou_threshold: f64) -> Option<&CurvePoint> {
        self.detection_curve
            .iter()
            .find(|p| p.threshold == iou_threshold)
    }

    /// Writes `dice_curve.csv`, `detection_curve.csv` and `cases.csv`.
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut w = csv::Writer::from_path(dir.join("dice_curve.csv"))?;
        w.write_record(["threshold", "mean_dice", "ci_lo", "ci_hi"])?;
        for p in &self.dice_curve {
            w.serialize((p.threshold, p.value, p.ci_lo, p.ci_hi))?;
        }
        w.flush()
            .map_err(|e| Error::io(dir.join("dice_curve.csv"), e))?;

        let mut w = csv::Writer::from_path(dir.join("detection_curve.csv"))?;
        w.write_record(["iou_threshold", "rate", "ci_lo", "ci_hi"])?;
        for p in &self.detection_curve {
            w.serialize((p.threshold, p.value, p.ci_lo, p.ci_hi))?;
        }
        w.flush()
            .map_err(|e| Error::io(dir.join("detection_curve.csv"), e))?;

        let mut w = csv::Writer::from_path(dir.join("cases.csv"))?;
        for c in &self.cases {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("cases.csv"), e))?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn curve_point(
    threshold: f64,
    values: &[f64],
    ci: &CiConfig,
    rng: &mut RngStream,
) -> Result<CurvePoint> {
    let value = mean(values);
    let (lo, hi) = bootstrap_ci(values, ci.resamples, ci.level, rng)?;
    // Percentile intervals can exclude the point estimate on skewed data.
    Ok(CurvePoint {
        threshold,
        value,
        ci_lo: lo.min(value),
        ci_hi: hi.max(value),
    })
}

/// A scored case: scibilic map plus ground truth.
#[derive(Debug, Clone)]
pub struct SweepCase {
    pub case_id: String,
    pub scibilic: Volume,
    pub truth: Mask,
}

/// Scores every case over a grid of binarization thresholds (mean Dice) and
/// of IoU thresholds (detection rate at binarization 0.15). Maps are min-max
/// normalized per case before thresholding.
pub fn threshold_sweep(
    cases: &[SweepCase],
    thresholds: &[f64],
    iou_thresholds: &[f64],
    ci: &CiConfig,
) -> Result<EvalReport> {
    if cases.is_empty() || thresholds.is_empty() || iou_thresholds.is_empty() {
        return Err(invalid!(
            "threshold sweep needs cases, thresholds and IoU thresholds"
        ));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid!("binarization threshold {t} outside [0, 1]"));
    }
    let normalized: Vec<Volume> = cases
        .iter()
        .map(|c| min_max_normalize(&c.scibilic))
        .collect();
    let root = RngStream::new(ci.seed);

    let mut dice_curve = Vec::with_capacity(thresholds.len());
    for (i, &t) in thresholds.iter().enumerate() {
        let scores = normalized
            .iter()
            .zip(cases)
            .map(|(map, c)| dice(&binarize_largest_component(map, t)?, &c.truth))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = root.derive_indexed("dice", i as u64);
        dice_curve.push(curve_point(t, &scores, ci, &mut rng)?);
    }

    let mut scored = Vec::with_capacity(cases.len());
    let mut ious = Vec::with_capacity(cases.len());
    for (map, c) in normalized.iter().zip(cases) {
        let pred = binarize_largest_component(map, DETECTION_BINARIZATION)?;
        let i = iou(&pred, &c.truth)?;
        ious.push(i);
        scored.push(CaseScore {
            case_id: c.case_id.clone(),
            dice: dice(&pred, &c.truth)?,
            iou: i,
            detected: i >= DETECTION_IOU,
        });
    }
    let mut detection_curve = Vec::with_capacity(iou_thresholds.len());
    for (j, &t) in iou_thresholds.iter().enumerate() {
        let hits: Vec<f64> = ious
            .iter()
            .map(|&i| if i >= t { 1.0 } else { 0.0 })
            .collect();
        let mut rng = root.derive_indexed("detection", j as u64);
        detection_curve.push(curve_point(t, &hits, ci, &mut rng)?);
    }
    Ok(EvalReport {
        dice_curve,
        detection_curve,
        cases: scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        Mask::new(vec![rows.len(), w], data).unwrap()
    }

    #[test]
    fn dice_iou_hand_counts() {
        let a = mask(&["##..", "##.."]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let c = mask(&["....", "..##"]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        let d = mask(&["#.#.", "#.#."]);
        assert_eq!(dice(&a, &d).unwrap(), 0.5);
        let e = mask(&["#.##", "#.##"]);
        // |A∩E|=2, |A∪E|=8
        assert_eq!(iou(&a, &e).unwrap(), 0.25);
        let f = mask(&["###.", "#..."]);
        // ∩ = 3, ∪ = 5
        assert_eq!(iou(&a, &f).unwrap(), 3.0 / 5.0);
        let g = mask(&["#...", "#.##"]);
        // ∩ = 2, ∪ = 6
        assert!((iou(&a, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = Mask::empty(&[2, 4]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &Mask::empty(&[4, 2])).is_err());
    }

    #[test]
    fn largest_component_selection() {
        let map = Volume::new(
            vec![3, 6],
            vec![
                1.0, 1.0, 0.0, 0.0, 1.0, 0.0, //
                1.0, 1.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, 1.0, 0.0,
            ],
        )
        .unwrap();
        let got = binarize_largest_component(&map, 0.5).unwrap();
        assert_eq!(got, mask(&["##....", "##....", ".#...."]));
        assert_eq!(binarize_largest_component(&map, 2.0).unwrap().count(), 0);
        let pos = Volume::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(binarize_largest_component(&pos, 0.0).unwrap().count(), 4);
    }

    #[test]
    fn diagonal_is_not_connected() {
        let map = Volume::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(binarize_largest_component(&map, 0.5).unwrap().count(), 1);
    }

    #[test]
    fn detection_hand_counts() {
        let truth = mask(&["##", "##"]);
        let cases = vec![
            (truth.clone(), truth.clone()),
            (mask(&["..", ".."]), truth.clone()),
        ];
        assert_eq!(detection_rate(&cases, 0.0).unwrap(), 1.0);
        assert_eq!(detection_rate(&cases, 0.9).unwrap(), 0.5);
        assert!(detection_rate(&[], 0.1).is_err());
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let mut rng = RngStream::new(1);
        assert_eq!(
            bootstrap_ci(&[0.7; 12], 200, 0.95, &mut rng).unwrap(),
            (0.7, 0.7)
        );
        assert_eq!(
            bootstrap_ci(&[0.3], 200, 0.95, &mut rng).unwrap(),
            (0.3, 0.3)
        );
        assert!(bootstrap_ci(&[], 200, 0.95, &mut rng).is_err());
        assert!(bootstrap_ci(&[1.0], 200, 1.0, &mut rng).is_err());
        assert!(bootstrap_ci(&[1.0, f64::NAN], 200, 0.95, &mut rng).is_err());
    }

    #[test]
    fn anomaly_insertion() {
        let fg = mask(&["......", ".####.", ".####.", ".####.", "......"]);
        let src = Volume::new(vec![5, 6], vec![1.0; 30]).unwrap();
        let mut rng = RngStream::new(4);
        let inst = insert_anomaly(&src, &fg, 2, &mut rng).unwrap();
        assert_eq!(inst.truth_mask.count(), 4);
        for i in 0..30 {
            if inst.truth_mask.data()[i] {
                assert_eq!(inst.corrupted.data()[i], 0.0);
                assert!(fg.data()[i]);
            } else {
                assert_eq!(inst.corrupted.data()[i], 1.0);
            }
        }
        assert_eq!(valid_placements(&fg, 2).unwrap().len(), 6);
        let err = insert_anomaly(&src, &fg, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NoPlacement(_)));
    }

    #[test]
    fn sweep_perfect_and_empty_maps() {
        let truth = mask(&["....", ".##.", ".##.", "...."]);
        let perfect = truth.to_volume();
        let zeros = Volume::zeros(&[4, 4]).unwrap();
        let ci = CiConfig::default();
        let grid = [0.1, 0.15, 0.5, 1.0];
        let r = threshold_sweep(
            &[SweepCase {
                case_id: "p".into(),
                scibilic: perfect,
                truth: truth.clone(),
            }],
            &grid,
            &[0.1, 0.5],
            &ci,
        )
        .unwrap();
        assert!(r.dice_curve.iter().all(|p| p.value == 1.0));
        assert!(r.detection_curve.iter().all(|p| p.value == 1.0));
        let r = threshold_sweep(
            &[SweepCase {
                case_id: "z".into(),
                scibilic: zeros,
                truth,
            }],
            &grid,
            &[0.1],
            &ci,
        )
        .unwrap();
        assert!(r.dice_curve.iter().all(|p| p.value == 0.0));
    }
}
