//! Training objectives.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to its differentiable input, computed in `f64`. The segmenter's
//! generator objective is
//!
//! ```text
//! total = w_ce * CE + w_ls * LS + w_bd * BD + w_adv * sum_heads(RaGAN_G)
//! ```

mod lovasz;
mod pixel;
mod ragan;

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lovasz::{lovasz_grad, lovasz_softmax, ClassSelection};
pub use pixel::{boundary_nll, cross_entropy};
pub use ragan::{ragan_d_loss, ragan_g_loss, ScoreLoss};

/// A scalar loss and its gradient with respect to a (C, H, W) input.
#[derive(Clone, Debug, PartialEq)]
pub struct MapLoss {
    pub value: f64,
    pub grad: Array3<f64>,
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Channel-wise log-softmax of (C, H, W) logits, max-subtracted.
pub fn log_softmax(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = logits.to_owned();
    for mut lane in out.lanes_mut(Axis(0)) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + lane.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        lane.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    log_softmax(logits).mapv_into(f64::exp)
}

/// Pulls a gradient with respect to log-probabilities back to logits.
pub fn log_softmax_backward(
    log_probs: ArrayView3<'_, f64>,
    grad: ArrayView3<'_, f64>,
) -> Array3<f64> {
    let mut out = grad.to_owned();
    for (mut g, lp) in out
        .lanes_mut(Axis(0))
        .into_iter()
        .zip(log_probs.lanes(Axis(0)))
    {
        let sum: f64 = g.sum();
        g.iter_mut()
            .zip(lp.iter())
            .for_each(|(g, &l)| *g -= l.exp() * sum);
    }
    out
}

/// Pulls a gradient with respect to probabilities back to logits.
pub fn softmax_backward(probs: ArrayView3<'_, f64>, grad: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = grad.to_owned();
    for (mut g, p) in out.lanes_mut(Axis(0)).into_iter().zip(probs.lanes(Axis(0))) {
        let dot: f64 = g.iter().zip(p.iter()).map(|(g, p)| g * p).sum();
        g.iter_mut()
            .zip(p.iter())
            .for_each(|(g, &p)| *g = p * (*g - dot));
    }
    out
}

/// Combination weights for the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub ls: f64,
    pub bd: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            ls: 1.0,
            bd: 1.0,
            adv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ce, self.ls, self.bd, self.adv];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if self.ce <= 0.0 {
            return Err(Error::InvalidConfig(
                "cross-entropy weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Generator-side terms entering [`composite_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms {
    pub ce: f64,
    pub ls: f64,
    pub bd: f64,
    pub adv_g: f64,
}

/// Per-term loss values for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub ls: f64,
    pub bd: f64,
    pub adv_g: f64,
    pub adv_d_core: f64,
    pub adv_d_pen: f64,
    pub adv_d_pair: f64,
    pub total: f64,
}

impl LossReport {
    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("ce", self.ce),
            ("ls", self.ls),
            ("bd", self.bd),
            ("adv_g", self.adv_g),
            ("adv_d_core", self.adv_d_core),
            ("adv_d_pen", self.adv_d_pen),
            ("adv_d_pair", self.adv_d_pair),
            ("total", self.total),
        ]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.entries().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFiniteLoss {
                term: term.into(),
                context: context.into(),
            }),
            None => Ok(()),
        }
    }
}

/// Weighted generator objective; discriminator entries are left at zero.
pub fn composite_loss(terms: GeneratorTerms, w: &LossWeights) -> Result<LossReport> {
    let report = LossReport {
        ce: terms.ce,
        ls: terms.ls,
        bd: terms.bd,
        adv_g: terms.adv_g,
        total: w.ce * terms.ce + w.ls * terms.ls + w.bd * terms.bd + w.adv * terms.adv_g,
        ..Default::default()
    };
    report.check_finite("composite loss")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_ce_only() {
        let w = LossWeights {
            ce: 1.0,
            ls: 0.0,
            bd: 0.0,
            adv: 0.0,
        };
        let t = GeneratorTerms {
            ce: 0.7,
            ls: 2.0,
            bd: 3.0,
            adv_g: 4.0,
        };
        assert_eq!(composite_loss(t, &w).unwrap().total, 0.7);
    }

    #[test]
    fn composite_extra_losses() {
        let w = LossWeights {
            ce: 1.0,
            ls: 1.0,
            bd: 1.0,
            adv: 0.0,
        };
        let t = GeneratorTerms {
            ce: 1.0,
            ls: 2.0,
            bd: 3.0,
            adv_g: 9.0,
        };
        assert_eq!(composite_loss(t, &w).unwrap().total, 6.0);
    }

    #[test]
    fn composite_rejects_nan() {
        let t = GeneratorTerms {
            ls: f64::NAN,
            ..Default::default()
        };
        match composite_loss(t, &LossWeights::default()) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "ls"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            ce: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
