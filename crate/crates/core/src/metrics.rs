//! Pixel confusion counts, the derived change-detection scores, and
//! TP/TN/FP/FN colour renders.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// A `{0, 1}` mask of `height x width` pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        contract!(data.len() == height * width, "mask data has {} pixels, expected {height}x{width}", data.len());
        contract!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(BinaryMask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn positives(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }
}

/// Pixel = 1 iff `sigmoid(logit) > threshold`.
pub fn binarize(logits: &[f32], height: usize, width: usize, threshold: f64) -> Result<BinaryMask> {
    contract!(logits.len() == height * width, "{} logits for a {height}x{width} mask", logits.len());
    let data = logits
        .iter()
        .map(|&x| u8::from(1.0 / (1.0 + (-(x as f64)).exp()) > threshold))
        .collect();
    Ok(BinaryMask { height, width, data })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn check_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    contract!(
        (pred.height, pred.width) == (gt.height, gt.width),
        "prediction is {}x{}, ground truth {}x{}",
        pred.height,
        pred.width,
        gt.height,
        gt.width
    );
    Ok(())
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(crate::Error::Contract("mask values must be 0 or 1".into())),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub oa: f64,
    pub kc: f64,
    pub iou: f64,
}

impl MetricSet {
    /// `[F1, Pre, Rec, OA, KC, IoU]`, the column order used in reports.
    pub fn as_array(&self) -> [f64; 6] {
        [self.f1, self.precision, self.recall, self.oa, self.kc, self.iou]
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Expected agreement by chance, the `PRE` term of kappa.
pub fn chance_agreement(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let n = tp + tn + fp + fn_;
    ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n)
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricSet> {
    contract!(c.total() > 0, "metrics need at least one pixel");
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let n = tp + tn + fp + fn_;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let oa = (tp + tn) / n;
    let pre = chance_agreement(c);
    let kc = if 1.0 - pre < 1e-12 {
        if oa == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pre) / (1.0 - pre)
    };
    let iou = ratio(tp, tp + fp + fn_);
    Ok(MetricSet {
        f1,
        precision,
        recall,
        oa,
        kc,
        iou,
    })
}

/// Colours each pixel by its confusion class.
pub fn render_confusion_map(pred: &BinaryMask, gt: &BinaryMask) -> Result<RgbImage> {
    check_pair(pred, gt)?;
    let mut img = RgbImage::new(pred.width as u32, pred.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = Rgb(match (pred.data[i], gt.data[i]) {
            (1, 1) => TP_COLOR,
            (1, _) => FP_COLOR,
            (_, 1) => FN_COLOR,
            _ => TN_COLOR,
        });
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn binarize_boundaries() {
        let m = binarize(&[0.0, 1.0, -1.0], 1, 3, 0.5).unwrap();
        assert_eq!(m.data, vec![0, 1, 0]);
    }

    #[test]
    fn two_by_two_enumeration() {
        let pred = mask(&[&[1, 0], &[1, 0]]);
        let gt = mask(&[&[1, 1], &[0, 0]]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 });
    }

    #[test]
    fn hand_case() {
        let m = compute_metrics(&ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 }).unwrap();
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.oa - 0.7).abs() < 1e-12);
        assert!((m.iou - 0.5).abs() < 1e-12);
        assert!((m.kc - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_conventions() {
        let m = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 5, tn: 3 }).unwrap();
        assert_eq!((m.precision, m.f1, m.iou), (0.0, 0.0, 0.0));
        let all_tn = compute_metrics(&ConfusionCounts { tn: 9, ..Default::default() }).unwrap();
        assert_eq!((all_tn.oa, all_tn.kc), (1.0, 1.0));
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(2, 3);
        assert!(confusion(&a, &b).is_err());
        assert!(render_confusion_map(&a, &b).is_err());
    }
}
