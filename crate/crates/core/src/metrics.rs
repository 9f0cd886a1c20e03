//! Detection metrics over scored samples, and SSIM.

use std::cmp::Ordering;

use pyrad_tensor::Tensor;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::loss::{classify, ScoredSample};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn class_counts(scores: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Numeric(format!("score of {} is not finite", s.id)));
    }
    let p = scores.iter().filter(|s| s.label.is_anomalous()).count();
    let n = scores.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Protocol(format!(
            "both classes required ({n} normal, {p} anomalous samples)"
        )));
    }
    Ok((p, n))
}

fn by_score(a: &ScoredSample, b: &ScoredSample) -> Ordering {
    a.score.total_cmp(&b.score)
}

/// Mann–Whitney AUC: the probability that a random anomaly outscores a
/// random normal sample, ties counting one half. Uses mid-ranks.
pub fn roc_auc(scores: &[ScoredSample]) -> Result<f64> {
    let (p, n) = class_counts(scores)?;
    let mut sorted: Vec<&ScoredSample> = scores.iter().collect();
    sorted.sort_by(|a, b| by_score(a, b));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|s| s.label.is_anomalous()).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One point of the ROC curve: samples scoring at or above `threshold`
/// are flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points for every distinct score in descending order, from (0,0)
/// at +∞ to (1,1) at the lowest score.
pub fn roc_curve(scores: &[ScoredSample]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(scores)?;
    let mut sorted: Vec<&ScoredSample> = scores.iter().collect();
    sorted.sort_by(|a, b| by_score(b, a));
    let mut out = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].label.is_anomalous() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: f64::from(s),
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(out)
}

/// Area under [`roc_curve`] by the trapezoid rule.
pub fn roc_auc_trapezoid(scores: &[ScoredSample]) -> Result<f64> {
    let pts = roc_curve(scores)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

/// (TPR, TNR) under [`classify`]: anomalous iff score > threshold.
pub fn tpr_tnr(scores: &[ScoredSample], threshold: f32) -> Result<(f64, f64)> {
    let (p, n) = class_counts(scores)?;
    let decisions = classify(scores, threshold);
    let (mut tp, mut tn) = (0usize, 0usize);
    for (s, d) in scores.iter().zip(decisions) {
        match (s.label, d) {
            (Label::Anomalous, Label::Anomalous) => tp += 1,
            (Label::Normal, Label::Normal) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / p as f64, tn as f64 / n as f64))
}

/// Threshold maximizing (TPR + TNR)/2 over the midpoints between adjacent
/// distinct scores plus the largest score (everything normal). Ties go to
/// the lowest threshold.
pub fn select_threshold(scores: &[ScoredSample]) -> Result<f32> {
    class_counts(scores)?;
    let mut values: Vec<f32> = scores.iter().map(|s| s.score).collect();
    values.sort_by(f32::total_cmp);
    values.dedup();
    let mut candidates: Vec<f32> = values
        .windows(2)
        .map(|w| {
            let mid = ((f64::from(w[0]) + f64::from(w[1])) / 2.0) as f32;
            // adjacent floats have no midpoint; the lower one splits identically
            if mid < w[1] { mid } else { w[0] }
        })
        .collect();
    candidates.push(*values.last().expect("non-empty"));
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for t in candidates {
        let (tpr, tnr) = tpr_tnr(scores, t)?;
        let balanced = (tpr + tnr) / 2.0;
        if balanced > best.0 {
            best = (balanced, t);
        }
    }
    Ok(best.1)
}

/// Fraction of correct decisions under [`classify`].
pub fn accuracy(scores: &[ScoredSample], threshold: f32) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Protocol("accuracy of an empty score set".into()));
    }
    let correct = scores
        .iter()
        .zip(classify(scores, threshold))
        .filter(|(s, d)| s.label == *d)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Summed-area table with a zero border: `(h+1)×(w+1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y, x);
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
        }
    }
    t
}

/// Mean SSIM over every 8×8 window (stride 1) of every channel, with
/// uniform weights, K1 = 0.01, K2 = 0.03 and dynamic range 1.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Config(format!("ssim shapes differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let &[c, h, w] = x.shape() else {
        return Err(Error::Config(format!("ssim expects C×H×W images, got {:?}", x.shape())));
    };
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(Error::Config(format!("ssim window {win}×{win} larger than image {h}×{w}")));
    }
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let area = (win * win) as f64;
    let mut total = 0.0f64;
    for ch in 0..c {
        let at = |t: &Tensor<f32>, yy: usize, xx: usize| f64::from(t.data()[(ch * h + yy) * w + xx]);
        let sx = integral(h, w, |a, b| at(x, a, b));
        let sy = integral(h, w, |a, b| at(y, a, b));
        let sxx = integral(h, w, |a, b| at(x, a, b) * at(x, a, b));
        let syy = integral(h, w, |a, b| at(y, a, b) * at(y, a, b));
        let sxy = integral(h, w, |a, b| at(x, a, b) * at(y, a, b));
        let rect = |t: &[f64], top: usize, left: usize| {
            let (bottom, right) = (top + win, left + win);
            t[bottom * (w + 1) + right] - t[top * (w + 1) + right] - t[bottom * (w + 1) + left] + t[top * (w + 1) + left]
        };
        for top in 0..=h - win {
            for left in 0..=w - win {
                let mx = rect(&sx, top, left) / area;
                let my = rect(&sy, top, left) / area;
                let vx = rect(&sxx, top, left) / area - mx * mx;
                let vy = rect(&syy, top, left) / area - my * my;
                let cxy = rect(&sxy, top, left) / area - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (c * (h - win + 1) * (w - win + 1)) as f64)
}

/// Image-level evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub threshold: f32,
    /// Mean SSIM between normal test images and their reconstructions.
    pub ssim_mean_normal: f64,
    /// At `threshold`.
    pub accuracy: f64,
    pub samples: Vec<ScoredSample>,
}

pub const REPORT_CSV_HEADER: &str = "config,auc,tpr,tnr,threshold,ssim,accuracy";

impl EvalReport {
    /// Rates at the balanced-accuracy threshold chosen on these scores.
    pub fn from_scores(samples: Vec<ScoredSample>, ssim_mean_normal: f64) -> Result<Self> {
        let auc = roc_auc(&samples)?;
        let threshold = select_threshold(&samples)?;
        let (tpr, tnr) = tpr_tnr(&samples, threshold)?;
        let accuracy = accuracy(&samples, threshold)?;
        Ok(Self {
            auc,
            tpr,
            tnr,
            threshold,
            ssim_mean_normal,
            accuracy,
            samples,
        })
    }

    pub fn csv_row(&self, config: &str) -> String {
        format!(
            "{config},{:.6},{:.6},{:.6},{},{:.6},{:.6}",
            self.auc, self.tpr, self.tnr, self.threshold, self.ssim_mean_normal, self.accuracy
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(normal: &[f32], anomalous: &[f32]) -> Vec<ScoredSample> {
        let mk = |score, label| ScoredSample { id: String::new(), score, label };
        normal
            .iter()
            .map(|&s| mk(s, Label::Normal))
            .chain(anomalous.iter().map(|&s| mk(s, Label::Anomalous)))
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&set(&[0.1, 0.2], &[0.9])).unwrap(), 1.0);
        assert_eq!(roc_auc(&set(&[0.2, 0.8], &[0.5])).unwrap(), 0.5);
        assert!((roc_auc(&set(&[0.1, 0.2, 0.3], &[0.25, 0.4])).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(roc_auc(&set(&[0.5], &[0.5])).unwrap(), 0.5);
        assert!(matches!(roc_auc(&set(&[0.1], &[])), Err(Error::Protocol(_))));
    }

    #[test]
    fn rates_examples() {
        let s = set(&[0.1, 0.6], &[0.5, 0.9]);
        assert_eq!(tpr_tnr(&s, 0.55).unwrap(), (0.5, 0.5));
        assert_eq!(tpr_tnr(&s, f32::NEG_INFINITY).unwrap(), (1.0, 0.0));
        assert_eq!(tpr_tnr(&set(&[0.1, 0.2], &[0.8]), 0.5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn threshold_examples() {
        let s = set(&[0.1, 0.2], &[0.8, 0.9]);
        let t = select_threshold(&s).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(tpr_tnr(&s, t).unwrap(), (1.0, 1.0));
        let flat = set(&[0.3, 0.3], &[0.3]);
        assert_eq!(select_threshold(&flat).unwrap(), 0.3);
        assert_eq!(tpr_tnr(&flat, 0.3).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn adjacent_floats_still_split() {
        let a = 1.0f32;
        let b = f32::from_bits(a.to_bits() + 1);
        let s = set(&[a], &[b]);
        let t = select_threshold(&s).unwrap();
        assert_eq!(tpr_tnr(&s, t).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&set(&[0.1], &[0.9]), 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&set(&[0.1, 0.2], &[0.3, 0.4]), f32::NEG_INFINITY).unwrap(), 0.5);
        assert!(accuracy(&[], 0.0).is_err());
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&set(&[0.1, 0.4, 0.4], &[0.4, 0.9])).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(pts.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
    }

    #[test]
    fn ssim_closed_forms() {
        let x = Tensor::from_fn([3, 9, 10], |i| ((i * 37) % 101) as f32 / 100.0);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let zeros = Tensor::zeros([3, 8, 8]);
        let ones = Tensor::ones([3, 8, 8]);
        let c1 = SSIM_K1 * SSIM_K1;
        assert!((ssim(&zeros, &ones).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros([3, 7, 9]), &Tensor::zeros([3, 7, 9])).is_err());
    }

    #[test]
    fn csv_row_has_schema_width() {
        let r = EvalReport::from_scores(set(&[0.1], &[0.9]), 0.5).unwrap();
        assert_eq!(r.csv_row("x").split(',').count(), REPORT_CSV_HEADER.split(',').count());
    }
}
