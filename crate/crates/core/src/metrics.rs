//! Pixel confusion counts and the scores derived from them.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
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

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(shape_err!("confusion", "prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(gt) {
        match (t, p) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `tp / (tp + fp + fn)`, or 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// `tp / (tp + (fp + fn) / 2)`, or 1 when both masks are empty.
pub fn f1(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64)
    }
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    let total = c.total();
    if total == 0 {
        1.0
    } else {
        (c.tp + c.tn) as f64 / total as f64
    }
}

/// Pooled scores over a fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: String,
    pub n_images: usize,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn from_counts(fold: impl Into<String>, n_images: usize, c: ConfusionCounts) -> Self {
        EvalReport {
            fold: fold.into(),
            n_images,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            iou: iou(&c),
            f1: f1(&c),
            accuracy: accuracy(&c),
        }
    }

    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp, tn: self.tn, fp: self.fp, fn_: self.fn_ }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::Error::Data(format!("metrics report: {e}")))
    }
}

/// Micro-averaged scores: counts are summed over all pairs first.
pub fn evaluate<'a>(
    fold: &str,
    pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>,
) -> Result<EvalReport> {
    let mut total = ConfusionCounts::default();
    let mut n = 0;
    for (pred, gt) in pairs {
        total += confusion(pred, gt)?;
        n += 1;
    }
    Ok(EvalReport::from_counts(fold, n, total))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn hand_scores() {
        assert_eq!(iou(&counts(3, 0, 1, 2)), 0.5);
        assert_eq!(f1(&counts(3, 0, 1, 1)), 0.75);
        assert_eq!(accuracy(&counts(2, 6, 1, 1)), 0.8);
        assert_eq!(f1(&counts(0, 5, 2, 1)), 0.0);
        assert_eq!(iou(&counts(0, 9, 0, 0)), 1.0);
        assert_eq!(f1(&counts(0, 9, 0, 0)), 1.0);
    }

    #[test]
    fn identical_and_extreme_masks() {
        let m = [true, false, true, true, false];
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c, counts(3, 2, 0, 0));
        assert_eq!((iou(&c), f1(&c), accuracy(&c)), (1.0, 1.0, 1.0));

        let c = confusion(&[true; 6], &[false; 6]).unwrap();
        assert_eq!(c, counts(0, 0, 6, 0));

        let inv: Vec<bool> = m.iter().map(|b| !b).collect();
        let c = confusion(&inv, &m).unwrap();
        assert_eq!(accuracy(&c), 0.0);
        assert_eq!(iou(&c), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(confusion(&[true; 3], &[true; 4]).is_err());
    }

    #[test]
    fn micro_aggregation() {
        let a_pred = [true, true, false];
        let a_gt = [true, false, false];
        let b_pred = [true, false, false];
        let b_gt = [true, true, false];
        let r = evaluate("val", [(&a_pred[..], &a_gt[..]), (&b_pred[..], &b_gt[..])]).unwrap();
        assert_eq!(r.n_images, 2);
        assert_eq!(r.iou, 0.5);
        let single = evaluate("val", [(&a_pred[..], &a_gt[..])]).unwrap();
        let c = confusion(&a_pred, &a_gt).unwrap();
        assert_eq!((single.iou, single.f1, single.accuracy), (iou(&c), f1(&c), accuracy(&c)));
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport::from_counts("test", 3, counts(17, 400, 9, 3));
        let json = r.to_json();
        assert!(json.contains("\"fn\": 3"));
        assert_eq!(EvalReport::from_json(&json).unwrap(), r);
    }

    #[test]
    fn random_pairs_match_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let density = rng.random_range(0.0..1.0);
            let pred: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
            let gt: Vec<bool> = (0..256).map(|_| rng.random_bool(0.3)).collect();
            let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
            for y in 0..16 {
                for x in 0..16 {
                    let (p, t) = (pred[y * 16 + x], gt[y * 16 + x]);
                    if p && t {
                        tp += 1;
                    } else if !p && !t {
                        tn += 1;
                    } else if p {
                        fp += 1;
                    } else {
                        fn_ += 1;
                    }
                }
            }
            let c = confusion(&pred, &gt).unwrap();
            assert_eq!(c, counts(tp, tn, fp, fn_));
            assert_eq!(c.total(), 256);
        }
    }

    fn masks() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
        (1usize..64).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
    }

    proptest! {
        #[test]
        fn iou_bounded_by_f1((p, t) in masks()) {
            let c = confusion(&p, &t).unwrap();
            prop_assert!(iou(&c) <= f1(&c) + 1e-15);
            prop_assert!(f1(&c) <= 1.0);
        }

        #[test]
        fn swapping_arguments_swaps_errors((p, t) in masks()) {
            let a = confusion(&p, &t).unwrap();
            let b = confusion(&t, &p).unwrap();
            prop_assert_eq!((a.fp, a.fn_, a.tp, a.tn), (b.fn_, b.fp, b.tp, b.tn));
            prop_assert_eq!(iou(&a), iou(&b));
        }

        #[test]
        fn counts_are_additive((p, t) in masks(), (q, u) in masks()) {
            let joined_p: Vec<bool> = p.iter().chain(&q).copied().collect();
            let joined_t: Vec<bool> = t.iter().chain(&u).copied().collect();
            let (a, b) = (confusion(&p, &t).unwrap(), confusion(&q, &u).unwrap());
            prop_assert_eq!(confusion(&joined_p, &joined_t).unwrap(), a + b);
        }
    }
}
