//! Relativistic-average GAN objectives on pre-sigmoid critic scores.
//!
//! Every `-log sigmoid(z)` is evaluated as `softplus(-z)`.

use super::{sigmoid, softplus};

/// Loss value with gradients for both score vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `-mean log σ(real - mean(fake)) - mean log σ(-(fake - mean(real)))`
pub fn ragan_d_loss(real: &[f64], fake: &[f64]) -> ScoreLoss {
    assert!(
        !real.is_empty() && !fake.is_empty(),
        "score vectors must be non-empty"
    );
    let (n, m) = (real.len() as f64, fake.len() as f64);
    let (mean_real, mean_fake) = (mean(real), mean(fake));

    let real_margin: Vec<f64> = real.iter().map(|r| r - mean_fake).collect();
    let fake_margin: Vec<f64> = fake.iter().map(|f| f - mean_real).collect();
    let value = real_margin.iter().map(|&a| softplus(-a)).sum::<f64>() / n
        + fake_margin.iter().map(|&b| softplus(b)).sum::<f64>() / m;

    // d softplus(-a)/da = -σ(-a), d softplus(b)/db = σ(b)
    let real_pull: Vec<f64> = real_margin.iter().map(|&a| -sigmoid(-a) / n).collect();
    let fake_push: Vec<f64> = fake_margin.iter().map(|&b| sigmoid(b) / m).collect();
    let sum_pull: f64 = real_pull.iter().sum();
    let sum_push: f64 = fake_push.iter().sum();

    ScoreLoss {
        value,
        d_real: real_pull.iter().map(|g| g - sum_push / n).collect(),
        d_fake: fake_push.iter().map(|g| g - sum_pull / m).collect(),
    }
}

/// `-mean log σ(fake - mean(real)) - mean log σ(-(real - mean(fake)))`,
/// i.e. the discriminator loss with the roles swapped.
pub fn ragan_g_loss(real: &[f64], fake: &[f64]) -> ScoreLoss {
    let swapped = ragan_d_loss(fake, real);
    ScoreLoss {
        value: swapped.value,
        d_real: swapped.d_fake,
        d_fake: swapped.d_real,
    }
}
