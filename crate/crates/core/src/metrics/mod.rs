//! Saliency evaluation measures: max-F, MAE, E-measure and S-measure.
//!
//! Predictions are soft maps in `[0, 1]`, ground truth is binary. Both may be
//! given as `1×H×W` or `H×W` tensors and must have identical shapes.

mod corpus;

pub use corpus::{CorpusReport, CorpusRow, CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight of precision against recall in Fβ.
pub const BETA_SQ: f64 = 0.3;
/// Number of binarization thresholds for max-F.
pub const DEFAULT_THRESHOLDS: usize = 255;
/// Object/region balance in the S-measure.
pub const S_ALPHA: f64 = 0.5;

const EPS: f64 = f64::EPSILON;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f_beta: f64,
    pub mae: f64,
    pub e_measure: f64,
    pub s_measure: f64,
}

/// Result of an F-measure evaluation. `degenerate` is set when the ground
/// truth has no foreground, in which case `value` is defined as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FMeasure {
    pub value: f64,
    pub degenerate: bool,
}

/// Height and width of a pair of maps, after checking the shapes agree.
fn map_dims(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    match *pred.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(op, format!("expected H×W or 1×H×W, got {:?}", pred.shape()))),
    }
}

fn check_binary(gt: &Tensor, op: &str) -> Result<()> {
    match gt.data().iter().position(|&g| g != 0.0 && g != 1.0) {
        Some(i) => Err(Error::Data(format!(
            "{op}: ground truth must be binary, found {} at element {i}",
            gt.data()[i]
        ))),
        None => Ok(()),
    }
}

fn check_unit(pred: &Tensor, op: &str) -> Result<()> {
    match pred.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
        Some(i) => Err(Error::Data(format!(
            "{op}: prediction must lie in [0, 1], found {} at element {i}",
            pred.data()[i]
        ))),
        None => Ok(()),
    }
}

fn validate(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let dims = map_dims(pred, gt, op)?;
    check_unit(pred, op)?;
    check_binary(gt, op)?;
    Ok(dims)
}

fn f_beta(precision: f64, recall: f64) -> f64 {
    if precision == 0.0 && recall == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / (BETA_SQ * precision + recall)
    }
}

/// Number of thresholds `i/n`, `i = 1..=n`, that a value reaches (`p ≥ i/n`).
fn thresholds_reached(p: f64, n: usize) -> usize {
    let mut b = ((p * n as f64).floor() as usize).min(n);
    while b < n && (b + 1) as f64 / n as f64 <= p {
        b += 1;
    }
    while b > 0 && b as f64 / n as f64 > p {
        b -= 1;
    }
    b
}

/// Max-F over the default 255 thresholds.
pub fn f_measure(pred: &Tensor, gt: &Tensor) -> Result<FMeasure> {
    f_measure_with(pred, gt, DEFAULT_THRESHOLDS)
}

/// Max-F over thresholds `i/n` for `i = 1..=n`; a pixel is foreground when
/// `pred ≥ threshold`. Doubling `n` keeps every previous threshold.
pub fn f_measure_with(pred: &Tensor, gt: &Tensor, n: usize) -> Result<FMeasure> {
    validate(pred, gt, "f_measure")?;
    if n == 0 {
        return Err(Error::Usage("f_measure needs at least one threshold".into()));
    }
    let positives = gt.sum();
    if positives == 0.0 {
        return Ok(FMeasure {
            value: 0.0,
            degenerate: true,
        });
    }
    // hist[b]: pixels reaching exactly b thresholds
    let mut fg_hist = vec![0usize; n + 1];
    let mut bg_hist = vec![0usize; n + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let b = thresholds_reached(p, n);
        if g == 1.0 {
            fg_hist[b] += 1;
        } else {
            bg_hist[b] += 1;
        }
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for i in (1..=n).rev() {
        tp += fg_hist[i];
        fp += bg_hist[i];
        let predicted = tp + fp;
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = tp as f64 / positives;
        best = best.max(f_beta(precision, recall));
    }
    Ok(FMeasure {
        value: best,
        degenerate: false,
    })
}

/// Fβ at the single adaptive threshold `min(2·mean(pred), 1)`.
pub fn adaptive_f_measure(pred: &Tensor, gt: &Tensor) -> Result<FMeasure> {
    validate(pred, gt, "adaptive_f_measure")?;
    let positives = gt.sum();
    if positives == 0.0 {
        return Ok(FMeasure {
            value: 0.0,
            degenerate: true,
        });
    }
    let t = (2.0 * pred.mean()).min(1.0);
    let (mut tp, mut predicted) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p >= t {
            predicted += 1.0;
            tp += g;
        }
    }
    let precision = if predicted == 0.0 { 0.0 } else { tp / predicted };
    Ok(FMeasure {
        value: f_beta(precision, tp / positives),
        degenerate: false,
    })
}

/// Mean absolute difference over pixels.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    map_dims(pred, gt, "mae")?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(total / pred.numel() as f64)
}

/// Enhanced-alignment measure of the prediction binarized at
/// `min(2·mean(pred), 1)`.
pub fn e_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    validate(pred, gt, "e_measure")?;
    let n = pred.numel() as f64;
    let t = (2.0 * pred.mean()).min(1.0);
    let fm: Vec<f64> = pred.data().iter().map(|&p| f64::from(u8::from(p >= t))).collect();
    let g = gt.data();
    let fg = gt.sum();
    let total: f64 = if fg == 0.0 {
        fm.iter().map(|f| 1.0 - f).sum()
    } else if fg == n {
        fm.iter().sum()
    } else {
        let mf = fm.iter().sum::<f64>() / n;
        let mg = fg / n;
        fm.iter()
            .zip(g)
            .map(|(f, g)| {
                let a = f - mf;
                let b = g - mg;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (1.0 + align) * (1.0 + align) / 4.0
            })
            .sum()
    };
    Ok(total / n)
}

/// Row-major view of an `h×w` map.
struct Map<'a> {
    data: &'a [f64],
    w: usize,
}

impl Map<'_> {
    fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            out.extend_from_slice(&self.data[r * self.w + cols.start..r * self.w + cols.end]);
        }
        out
    }
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than two values.
fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean_of(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Foreground similarity of the prediction values inside a region.
fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean_of(values);
    2.0 * x / (x * x + 1.0 + sample_std(values) + EPS)
}

fn object_score(pred: &[f64], gt: &[f64]) -> f64 {
    let u = mean_of(gt);
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p).collect();
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

/// SSIM-style similarity of one block.
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let n = pred.len();
    let x = mean_of(pred);
    let y = mean_of(gt);
    let d = n.saturating_sub(1).max(1) as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sxx += (p - x) * (p - x);
        syy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(x, y)`: the rounded foreground centroid plus one, or the
/// image centre when there is no foreground.
fn centroid(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if gt[r * w + c] == 1.0 {
                sx += c as f64;
                sy += r as f64;
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize,
            (h as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let x = (sx / count).round_ties_even() as usize + 1;
    let y = (sy / count).round_ties_even() as usize + 1;
    (x.min(w), y.min(h))
}

fn region_score(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let (x, y) = centroid(gt, h, w);
    let p = Map { data: pred, w };
    let g = Map { data: gt, w };
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let blocks = [
        (0..y, 0..x, w1),
        (0..y, x..w, w2),
        (y..h, 0..x, w3),
        (y..h, x..w, w4),
    ];
    blocks
        .into_iter()
        .map(|(rows, cols, weight)| {
            let s = block_ssim(&p.block(rows.clone(), cols.clone()), &g.block(rows, cols));
            weight * s
        })
        .sum()
}

/// Structure measure `α·S_object + (1 − α)·S_region`, α = 0.5.
pub fn s_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = validate(pred, gt, "s_measure")?;
    let y = gt.mean();
    let score = if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        let (p, g) = (pred.data(), gt.data());
        S_ALPHA * object_score(p, g) + (1.0 - S_ALPHA) * region_score(p, g, h, w)
    };
    Ok(score.clamp(0.0, 1.0))
}

/// All four measures for one image.
pub fn evaluate(pred: &Tensor, gt: &Tensor) -> Result<EvalReport> {
    Ok(EvalReport {
        f_beta: f_measure(pred, gt)?.value,
        mae: mae(pred, gt)?,
        e_measure: e_measure(pred, gt)?,
        s_measure: s_measure(pred, gt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[1, h, w], v.to_vec()).unwrap()
    }

    fn half() -> Tensor {
        map(2, 2, &[1.0, 1.0, 0.0, 0.0])
    }

    #[test]
    fn all_ones_predictor_on_half_mask() {
        let f = f_measure(&Tensor::ones(&[1, 2, 2]), &half()).unwrap();
        assert!((f.value - 1.3 * 0.5 / (0.3 * 0.5 + 1.0)).abs() < 1e-12);
        assert!((f.value - 0.5652).abs() < 1e-4);
    }

    #[test]
    fn empty_ground_truth_is_flagged() {
        let f = f_measure(&half(), &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(f, FMeasure { value: 0.0, degenerate: true });
    }

    #[test]
    fn non_binary_gt_rejected() {
        let gt = map(1, 2, &[0.5, 1.0]);
        assert!(matches!(f_measure(&gt, &gt), Err(Error::Data(_))));
    }

    #[test]
    fn threshold_counting_matches_comparisons() {
        for &p in &[0.0, 1.0 / 255.0, 0.5, 0.999, 1.0, 0.1 + 0.2] {
            let direct = (1..=255).filter(|&i| p >= i as f64 / 255.0).count();
            assert_eq!(thresholds_reached(p, 255), direct, "{p}");
        }
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(3, 3, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let r = evaluate(&gt, &gt).unwrap();
        assert_eq!(r.f_beta, 1.0);
        assert_eq!(r.mae, 0.0);
        assert!((r.e_measure - 1.0).abs() < 1e-12);
        assert!((r.s_measure - 1.0).abs() < 1e-6);
    }

    #[test]
    fn complement_scores_low() {
        let gt = map(4, 4, &[1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0.]);
        let inv = map(4, 4, &gt.data().iter().map(|g| 1.0 - g).collect::<Vec<_>>());
        assert!(e_measure(&inv, &gt).unwrap() < 0.25);
        assert!(s_measure(&inv, &gt).unwrap() < 0.5);
    }

    #[test]
    fn degenerate_branches() {
        let pred = map(1, 4, &[0.2, 0.9, 0.0, 0.6]);
        let zeros = Tensor::zeros(&[1, 1, 4]);
        let ones = Tensor::ones(&[1, 1, 4]);
        // binarized at 2·mean = 0.85: only 0.9 survives
        assert!((e_measure(&pred, &zeros).unwrap() - 0.75).abs() < 1e-15);
        assert!((e_measure(&pred, &ones).unwrap() - 0.25).abs() < 1e-15);
        assert!((s_measure(&pred, &zeros).unwrap() - (1.0 - 0.425)).abs() < 1e-15);
        assert!((s_measure(&pred, &ones).unwrap() - 0.425).abs() < 1e-15);
    }
}
