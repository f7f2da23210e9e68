//! Query matching, the segmentation loss and proposal fusion.
//!
//! Class logits pass through a sigmoid; mask losses are pixel-mean binary
//! cross-entropies with probabilities clamped to `[1e-7, 1 - 1e-7]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{clamped_log_sigmoid, sigmoid, Graph, Scalar, Tensor, Var};
use crate::seghead::MaskPrediction;

pub const PROB_EPS: f64 = 1e-7;

/// Guard on the total class confidence during fusion.
pub const FUSE_EPS: f64 = 1e-7;

/// An image is a positive sample iff its mask has a foreground pixel.
pub fn is_positive<T: Scalar>(gt: &[T]) -> bool {
    gt.iter().any(|&v| v > T::of(0.5))
}

fn bce_pixel(logit: f64, target: f64) -> f64 {
    -(target * clamped_log_sigmoid(logit, PROB_EPS) + (1.0 - target) * clamped_log_sigmoid(-logit, PROB_EPS))
}

/// `-log sigmoid(C_i) + BCE(gt, sigmoid(M_i))` for every query.
///
/// `mask_logits` is `[N, H * W]` row-major, `gt` is `H * W`.
pub fn matching_costs<T: Scalar>(mask_logits: &[T], class_logits: &[T], gt: &[T]) -> Result<Vec<f64>> {
    let n = class_logits.len();
    let hw = gt.len();
    if n == 0 || hw == 0 || mask_logits.len() != n * hw {
        return Err(shape_err!(
            "matching_costs",
            "{} mask logits for {n} queries over {hw} pixels",
            mask_logits.len()
        ));
    }
    Ok(mask_logits
        .chunks(hw)
        .zip(class_logits)
        .map(|(row, &c)| {
            let mask: f64 = row.iter().zip(gt).map(|(&x, &y)| bce_pixel(x.as_f64(), y.as_f64())).sum();
            -clamped_log_sigmoid(c.as_f64(), PROB_EPS) + mask / hw as f64
        })
        .collect())
}

/// Index of the cheapest query; ties go to the lowest index.
pub fn match_query<T: Scalar>(mask_logits: &[T], class_logits: &[T], gt: &[T]) -> Result<usize> {
    let costs = matching_costs(mask_logits, class_logits, gt)?;
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate().skip(1) {
        if c < costs[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    /// Matched query on positive images, `None` on negatives.
    pub matched: Option<usize>,
}

/// Segmentation loss of one image against its `H x W` binary mask.
///
/// Positive images supervise only the matched query. Negative images push
/// every class logit and every mask pixel toward zero.
pub fn loss<T: Scalar>(g: &mut Graph<T>, pred: &MaskPrediction, gt: &Tensor<T>) -> Result<LossOutput> {
    loss_with(g, pred, gt, false)
}

/// [`loss`], optionally adding the same mask term for every intermediate
/// decoder mask.
pub fn loss_with<T: Scalar>(
    g: &mut Graph<T>,
    pred: &MaskPrediction,
    gt: &Tensor<T>,
    deep_supervision: bool,
) -> Result<LossOutput> {
    let hw = pred.height * pred.width;
    if gt.len() != hw {
        return Err(shape_err!(
            "loss",
            "mask of {:?} for a {}x{} prediction",
            gt.shape(),
            pred.height,
            pred.width
        ));
    }
    let n = pred.n_queries;
    let mut aux: Vec<Var> = Vec::new();
    if deep_supervision {
        aux.extend(&pred.intermediate);
    }
    if is_positive(gt.data()) {
        let idx = match_query(g.value(pred.mask_logits).data(), g.value(pred.class_logits).data(), gt.data())?;
        let target = gt.clone().reshape([1, hw])?;
        let col = g.reshape(pred.class_logits, &[n, 1])?;
        let c = g.slice_rows(col, idx, 1)?;
        let mut total = g.bce_with_logits(c, &Tensor::ones([1, 1]), PROB_EPS)?;
        for m in std::iter::once(pred.mask_logits).chain(aux) {
            let row = g.slice_rows(m, idx, 1)?;
            let term = g.bce_with_logits(row, &target, PROB_EPS)?;
            total = g.add(total, term)?;
        }
        Ok(LossOutput { total, matched: Some(idx) })
    } else {
        let mut total = g.bce_with_logits(pred.class_logits, &Tensor::zeros([n]), PROB_EPS)?;
        let zeros = Tensor::zeros([n, hw]);
        for m in std::iter::once(pred.mask_logits).chain(aux) {
            let term = g.bce_with_logits(m, &zeros, PROB_EPS)?;
            total = g.add(total, term)?;
        }
        Ok(LossOutput { total, matched: None })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuseMode {
    /// Class confidences normalised to sum to one.
    #[default]
    Normalized,
    /// Raw `sum_i sigmoid(C_i) sigmoid(M_i)`, clipped to 1.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedMask {
    pub height: usize,
    pub width: usize,
    pub prob: Vec<f64>,
    pub mask: Vec<bool>,
}

impl FusedMask {
    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Merge proposals into one binary mask, thresholding the merged
/// probability at `threshold` (inclusive).
pub fn fuse<T: Scalar>(
    mask_logits: &[T],
    class_logits: &[T],
    height: usize,
    width: usize,
    mode: FuseMode,
    threshold: f64,
) -> Result<FusedMask> {
    let hw = height * width;
    let n = class_logits.len();
    if n == 0 || mask_logits.len() != n * hw {
        return Err(shape_err!("fuse", "{} mask logits for {n} queries over {hw} pixels", mask_logits.len()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid!("fuse threshold {threshold} outside [0, 1]"));
    }
    let conf: Vec<f64> = class_logits.iter().map(|&c| sigmoid(c.as_f64())).collect();
    let total: f64 = conf.iter().sum();
    let weights: Vec<f64> = match mode {
        FuseMode::Normalized if total < FUSE_EPS => vec![0.0; n],
        FuseMode::Normalized => conf.iter().map(|&c| c / total.max(FUSE_EPS)).collect(),
        FuseMode::Literal => conf,
    };
    let mut prob = vec![0.0f64; hw];
    for (row, &w) in mask_logits.chunks(hw).zip(&weights) {
        if w == 0.0 {
            continue;
        }
        for (p, &x) in prob.iter_mut().zip(row) {
            *p += w * sigmoid(x.as_f64());
        }
    }
    prob.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    let mask = prob.iter().map(|&p| p >= threshold).collect();
    Ok(FusedMask { height, width, prob, mask })
}

/// [`fuse`] on a prediction recorded in `g`.
pub fn fuse_prediction<T: Scalar>(
    g: &Graph<T>,
    pred: &MaskPrediction,
    mode: FuseMode,
    threshold: f64,
) -> Result<FusedMask> {
    fuse(
        g.value(pred.mask_logits).data(),
        g.value(pred.class_logits).data(),
        pred.height,
        pred.width,
        mode,
        threshold,
    )
}
