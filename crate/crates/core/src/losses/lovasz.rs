//! Lovász-Softmax: the Lovász extension of the per-class Jaccard loss,
//! evaluated on the vector of per-pixel probability errors.

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};

use super::MapLoss;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassSelection {
    /// Only classes that occur in the label map.
    #[default]
    Present,
    /// Every class; absent classes contribute zero.
    All,
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order. `gt_sorted` holds the ground-truth
/// membership in that same order.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let total = gt_sorted.iter().filter(|&&g| g).count() as f64;
    if total == 0.0 {
        return vec![0.0; gt_sorted.len()];
    }
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jaccard = 1.0 - (total - cum_fg) / (total + cum_bg);
            let step = jaccard - prev;
            prev = jaccard;
            step
        })
        .collect()
}

/// Mean over selected classes of the Lovász hinge on `|1{y=c} - p_c|`.
/// The gradient is with respect to `probs`, holding the sort order fixed.
pub fn lovasz_softmax(
    probs: ArrayView3<'_, f64>,
    labels: ArrayView2<'_, u8>,
    classes: ClassSelection,
) -> MapLoss {
    let num_classes = probs.len_of(Axis(0));
    let labels: Vec<u8> = labels.iter().copied().collect();
    let mut grad = Array3::zeros(probs.raw_dim());
    let mut total = 0.0;
    let mut counted = 0usize;

    for c in 0..num_classes {
        let fg: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        let present = fg.iter().any(|&f| f);
        if classes == ClassSelection::Present && !present {
            continue;
        }
        counted += 1;
        if !present {
            continue;
        }
        let class_probs: Vec<f64> = probs.index_axis(Axis(0), c).iter().copied().collect();
        let errors: Vec<f64> = fg
            .iter()
            .zip(&class_probs)
            .map(|(&f, &p)| if f { 1.0 - p } else { p }.abs())
            .collect();
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let g = lovasz_grad(&gt_sorted);

        let mut class_grad = grad.index_axis_mut(Axis(0), c);
        let plane = class_grad.as_slice_mut().expect("contiguous gradient");
        for (&i, &gi) in order.iter().zip(&g) {
            total += errors[i] * gi;
            // d|f - p|/dp for p in [0, 1]
            plane[i] = if fg[i] { -gi } else { gi };
        }
    }

    if counted == 0 {
        return MapLoss { value: 0.0, grad };
    }
    let scale = 1.0 / counted as f64;
    grad.mapv_inplace(|g| g * scale);
    MapLoss {
        value: total * scale,
        grad,
    }
}
