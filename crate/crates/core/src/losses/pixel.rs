use ndarray::{Array3, ArrayView2, ArrayView3, Zip};

use super::{log_softmax, MapLoss};

/// Mean pixel-wise `-log softmax(logits)[label]`; gradient is with respect to logits.
pub fn cross_entropy(logits: ArrayView3<'_, f64>, labels: ArrayView2<'_, u8>) -> MapLoss {
    let (_, h, w) = logits.dim();
    let n = (h * w) as f64;
    let log_probs = log_softmax(logits);
    let mut grad = log_probs.mapv(|lp| lp.exp() / n);
    let mut value = 0.0;
    for ((y, x), &l) in labels.indexed_iter() {
        value -= log_probs[[l as usize, y, x]];
        grad[[l as usize, y, x]] -= 1.0 / n;
    }
    MapLoss {
        value: value / n,
        grad,
    }
}

/// Weighted NLL over boundary pixels (weight > 1), normalized by the band size.
/// The gradient is with respect to the log-probabilities.
pub fn boundary_nll(
    log_probs: ArrayView3<'_, f64>,
    labels: ArrayView2<'_, u8>,
    weights: ArrayView2<'_, f32>,
) -> MapLoss {
    let band = weights.iter().filter(|&&w| w > 1.0).count();
    let norm = band.max(1) as f64;
    let mut grad = Array3::zeros(log_probs.raw_dim());
    let mut value = 0.0;
    Zip::indexed(&labels)
        .and(&weights)
        .for_each(|(y, x), &l, &w| {
            if w > 1.0 {
                let idx = [l as usize, y, x];
                value -= w as f64 * log_probs[idx];
                grad[idx] = -(w as f64) / norm;
            }
        });
    MapLoss {
        value: value / norm,
        grad,
    }
}
