use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Number of IoU thresholds, `0.00, 0.01, …, 1.00`.
pub const SR_STEPS: usize = 101;
/// Largest pixel radius on the precision curve.
pub const PR_MAX_RADIUS: usize = 50;
pub const PR_RADIUS: f64 = 20.0;

pub fn sr_thresholds() -> Vec<f64> {
    (0..SR_STEPS).map(|k| k as f64 / 100.0).collect()
}

pub fn pr_radii() -> Vec<f64> {
    (0..=PR_MAX_RADIUS).map(|r| r as f64).collect()
}

/// `|A ∩ B| / |A ∪ B|`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    // areas from the same corners as the intersection, so identical boxes
    // give exactly 1
    let area = |bb: &BBox| {
        let [x1, y1, x2, y2] = bb.corners();
        (x2 - x1) * (y2 - y1)
    };
    let inter = a.intersection(b);
    Ok((inter / (area(a) + area(b) - inter)).clamp(0.0, 1.0))
}

fn non_empty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::Contract(format!("{what} over an empty frame list")))
    } else {
        Ok(())
    }
}

/// Fraction of frames with IoU above `threshold`. A perfect overlap counts
/// at every threshold, including 1.
pub fn success_rate(ious: &[f64], threshold: f64) -> Result<f64> {
    non_empty(ious, "success rate")?;
    let hits = ious.iter().filter(|&&v| v > threshold || v >= 1.0).count();
    Ok(hits as f64 / ious.len() as f64)
}

/// Mean success rate over the 101-point threshold grid.
pub fn auc(ious: &[f64]) -> Result<f64> {
    Ok(success_curve(ious)?.iter().sum::<f64>() / SR_STEPS as f64)
}

pub fn success_curve(ious: &[f64]) -> Result<Vec<f64>> {
    sr_thresholds().into_iter().map(|t| success_rate(ious, t)).collect()
}

/// Fraction of frames whose centre error is below `radius`; exact hits
/// always count.
pub fn precision_rate(distances: &[f64], radius: f64) -> Result<f64> {
    non_empty(distances, "precision rate")?;
    let hits = distances.iter().filter(|&&d| d < radius || d == 0.0).count();
    Ok(hits as f64 / distances.len() as f64)
}

pub fn precision_curve(distances: &[f64]) -> Result<Vec<f64>> {
    pr_radii().into_iter().map(|r| precision_rate(distances, r)).collect()
}

/// Per-frame overlaps and centre errors with their curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub ious: Vec<f64>,
    pub distances: Vec<f64>,
    pub sr_curve: Vec<f64>,
    pub pr_curve: Vec<f64>,
}

impl SequenceResult {
    pub fn new(pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::dim("sequence_result", &[pred.len()], &[gt.len()]));
        }
        let ious = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect::<Result<Vec<_>>>()?;
        let distances: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
        let res = Self {
            sr_curve: success_curve(&ious)?,
            pr_curve: precision_curve(&distances)?,
            ious,
            distances,
        };
        res.check_monotone()?;
        Ok(res)
    }

    fn check_monotone(&self) -> Result<()> {
        let sr_ok = self.sr_curve.windows(2).all(|w| w[1] <= w[0]);
        let pr_ok = self.pr_curve.windows(2).all(|w| w[1] >= w[0]);
        if sr_ok && pr_ok {
            Ok(())
        } else {
            Err(Error::Numerical("success/precision curves are not monotone".into()))
        }
    }

    pub fn sr_auc(&self) -> f64 {
        self.sr_curve.iter().sum::<f64>() / SR_STEPS as f64
    }

    pub fn sr_at(&self, threshold: f64) -> Result<f64> {
        success_rate(&self.ious, threshold)
    }

    pub fn pr_at(&self, radius: f64) -> Result<f64> {
        precision_rate(&self.distances, radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2)
    }

    #[test]
    fn iou_examples() {
        let a = corners(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &corners(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!((iou(&a, &corners(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(matches!(iou(&a, &BBox::new(0.0, 0.0, 0.0, 1.0)), Err(Error::Validation(_))));
    }

    #[test]
    fn success_examples() {
        let ones = [1.0; 5];
        for t in sr_thresholds() {
            assert_eq!(success_rate(&ones, t).unwrap(), 1.0);
        }
        assert_eq!(auc(&ones).unwrap(), 1.0);
        assert!((success_rate(&[0.2, 0.6, 0.8], 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(success_rate(&[], 0.5), Err(Error::Contract(_))));
        assert!(matches!(auc(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_of_constant_counts_thresholds_below() {
        for c in [0.0, 0.005, 0.25, 0.5, 0.505, 0.999] {
            let below = sr_thresholds().iter().filter(|&&t| t < c).count();
            assert_eq!(auc(&[c; 4]).unwrap(), below as f64 / 101.0, "c = {c}");
        }
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_rate(&[0.0, 0.0], 20.0).unwrap(), 1.0);
        assert_eq!(precision_rate(&[5.0, 25.0], 20.0).unwrap(), 0.5);
        assert_eq!(precision_rate(&[0.0, 3.0, 0.0, 1e-9], 0.0).unwrap(), 0.5);
        assert!(precision_rate(&[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn curves_are_monotone(ious in proptest::collection::vec(0.0f64..=1.0, 1..20),
                               d in proptest::collection::vec(0.0f64..80.0, 1..20)) {
            let sr = success_curve(&ious).unwrap();
            prop_assert!(sr.windows(2).all(|w| w[1] <= w[0]));
            let pr = precision_curve(&d).unwrap();
            prop_assert!(pr.windows(2).all(|w| w[1] >= w[0]));
        }

        #[test]
        fn iou_is_symmetric_and_bounded(x in -5.0f64..5.0, y in -5.0f64..5.0, w in 0.1f64..4.0, h in 0.1f64..4.0) {
            let a = BBox::new(0.0, 0.0, 2.0, 3.0);
            let b = BBox::new(x, y, w, h);
            let v = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a).unwrap());
        }
    }
}
