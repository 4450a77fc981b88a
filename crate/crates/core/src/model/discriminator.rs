//! Relativistic critics for the core, penumbra and core+penumbra heads.
//!
//! Each critic sees the three input sequences concatenated with the
//! segmentation channel(s) of its head: soft probabilities for the fake
//! branch, one-hot ground truth for the real branch.

use std::ops::Range;

use ndarray::{s, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, GlobalAvgPool, LeakyRelu, Linear, Module, Param};

const LEAK: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub num_downsamples: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 4,
            base_width: 64,
            num_downsamples: 4,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.num_downsamples == 0 {
            return Err(Error::InvalidConfig(format!(
                "discriminator channels and depth must be positive: {self:?}"
            )));
        }
        if self.num_downsamples > 8 {
            return Err(Error::InvalidConfig(
                "at most 8 discriminator downsamples".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    act: LeakyRelu,
}

/// Strided 4x4 conv stack, global average pool and a linear scoring head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    blocks: Vec<DownBlock>,
    pool: GlobalAvgPool,
    fc: Linear,
}

pub fn build_discriminator(config: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    Discriminator::new(config.clone(), seed)
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = config.in_channels;
        let mut blocks = Vec::with_capacity(config.num_downsamples);
        for i in 0..config.num_downsamples {
            let cout = config.base_width << i;
            blocks.push(DownBlock {
                conv: Conv2d::new(cin, cout, 4, 2, 1, i == 0, &mut rng),
                bn: (i > 0).then(|| BatchNorm2d::new(cout)),
                act: LeakyRelu::new(LEAK),
            });
            cin = cout;
        }
        let fc = Linear::new(cin, 1, &mut rng);
        Ok(Discriminator {
            config,
            blocks,
            pool: GlobalAvgPool::default(),
            fc,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn set_training(&mut self, training: bool) {
        for b in &mut self.blocks {
            if let Some(bn) = b.bn.as_mut() {
                bn.set_training(training);
            }
        }
    }

    /// (B, C, H, W) -> (B, 1) pre-sigmoid scores.
    pub fn forward(&mut self, x: &Array4<f32>) -> Result<Array2<f32>> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::ShapeError(format!(
                "discriminator expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let min = 1 << self.config.num_downsamples;
        if h < min || w < min {
            return Err(Error::ShapeError(format!(
                "discriminator input {h}x{w} smaller than {min}x{min}"
            )));
        }
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.conv.forward(&h);
            if let Some(bn) = b.bn.as_mut() {
                h = bn.forward(&h);
            }
            h = b.act.forward(&h);
        }
        let pooled = self.pool.forward(&h);
        Ok(self.fc.forward(&pooled))
    }

    /// Gradient of the scores with respect to the input; accumulates parameter gradients.
    pub fn backward(&mut self, dscores: &Array2<f32>) -> Array4<f32> {
        let dpooled = self.fc.backward(dscores);
        let mut d = self.pool.backward(&dpooled);
        for b in self.blocks.iter_mut().rev() {
            d = b.act.backward(&d);
            if let Some(bn) = b.bn.as_mut() {
                d = bn.backward(&d);
            }
            d = b.conv.backward(&d);
        }
        d
    }
}

impl Module for Discriminator {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let name = join(prefix, &format!("conv{i}"));
            b.conv.params_mut(&name, out);
            if let Some(bn) = b.bn.as_mut() {
                bn.params_mut(&join(&name, "bn"), out);
            }
        }
        self.fc.params_mut(&join(prefix, "fc"), out);
    }
}

/// The three adversarial heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Core,
    Penumbra,
    Pair,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Core, Head::Penumbra, Head::Pair];

    pub fn name(self) -> &'static str {
        match self {
            Head::Core => "core",
            Head::Penumbra => "pen",
            Head::Pair => "pair",
        }
    }

    /// Class channels of the probability map this head sees.
    pub fn class_channels(self) -> Range<usize> {
        match self {
            Head::Core => 2..3,
            Head::Penumbra => 1..2,
            Head::Pair => 1..3,
        }
    }
}

/// One critic per [`Head`], in [`Head::ALL`] order.
#[derive(Clone, Debug)]
pub struct DiscriminatorSet {
    base: DiscriminatorConfig,
    pub heads: Vec<Discriminator>,
}

impl DiscriminatorSet {
    /// `base.in_channels` is the number of image channels; each head adds its
    /// class channels on top.
    pub fn new(base: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        base.validate()?;
        let heads = Head::ALL
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let cfg = DiscriminatorConfig {
                    in_channels: base.in_channels + head.class_channels().len(),
                    ..base.clone()
                };
                Discriminator::new(cfg, seed.wrapping_add(i as u64))
            })
            .collect::<Result<_>>()?;
        Ok(DiscriminatorSet {
            base: base.clone(),
            heads,
        })
    }

    pub fn base_config(&self) -> &DiscriminatorConfig {
        &self.base
    }

    pub fn head(&mut self, head: Head) -> &mut Discriminator {
        &mut self.heads[head as usize]
    }

    pub fn set_training(&mut self, training: bool) {
        self.heads.iter_mut().for_each(|d| d.set_training(training));
    }
}

impl Module for DiscriminatorSet {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (head, d) in Head::ALL.iter().zip(self.heads.iter_mut()) {
            d.params_mut(&join(prefix, &format!("disc.{}", head.name())), out);
        }
    }
}

/// Real and fake critic inputs for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInputs {
    pub head: Head,
    pub real: Array4<f32>,
    pub fake: Array4<f32>,
}

/// Builds `[inputs ‖ onehot[:, ch]]` (real) and `[inputs ‖ probs[:, ch]]`
/// (fake) for every head.
pub fn discriminator_inputs(
    probs: &Array4<f32>,
    labels_onehot: &Array4<f32>,
    inputs: &Array4<f32>,
) -> Result<Vec<HeadInputs>> {
    let (b, c, h, w) = probs.dim();
    if labels_onehot.dim() != probs.dim() || c != 3 {
        return Err(Error::ShapeError(format!(
            "probs {:?} and one-hot {:?} must both be (B, 3, H, W)",
            probs.dim(),
            labels_onehot.dim()
        )));
    }
    let (ib, _, ih, iw) = inputs.dim();
    if (ib, ih, iw) != (b, h, w) {
        return Err(Error::ShapeError(format!(
            "inputs {:?} do not match probs {:?}",
            inputs.dim(),
            probs.dim()
        )));
    }
    Ok(Head::ALL
        .iter()
        .map(|&head| {
            let ch = head.class_channels();
            let cat = |maps: &Array4<f32>| {
                ndarray::concatenate(
                    ndarray::Axis(1),
                    &[inputs.view(), maps.slice(s![.., ch.clone(), .., ..])],
                )
                .expect("shapes checked")
                .as_standard_layout()
                .into_owned()
            };
            HeadInputs {
                head,
                real: cat(labels_onehot),
                fake: cat(probs),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(in_channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels,
            base_width: 4,
            num_downsamples: 4,
        }
    }

    #[test]
    fn scores_shape() {
        let mut d = build_discriminator(&cfg(4), 0).unwrap();
        assert_eq!(
            d.forward(&Array4::zeros((2, 4, 96, 96))).unwrap().dim(),
            (2, 1)
        );
        let mut pair = build_discriminator(&cfg(5), 0).unwrap();
        assert_eq!(
            pair.forward(&Array4::zeros((3, 5, 64, 32))).unwrap().dim(),
            (3, 1)
        );
        assert!(matches!(
            d.forward(&Array4::zeros((2, 5, 96, 96))),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn head_inputs() {
        let probs = Array4::from_elem((2, 3, 8, 8), 1.0 / 3.0);
        let onehot = Array4::from_shape_fn((2, 3, 8, 8), |(_, c, _, _)| f32::from(c == 0));
        let inputs = Array4::zeros((2, 3, 8, 8));
        let heads = discriminator_inputs(&probs, &onehot, &inputs).unwrap();
        let channels: Vec<usize> = heads.iter().map(|h| h.real.dim().1).collect();
        assert_eq!(channels, vec![4, 4, 5]);
        assert!(heads.iter().all(|h| h.fake.dim().0 == 2));
        let same = discriminator_inputs(&onehot, &onehot, &inputs).unwrap();
        assert!(same.iter().all(|h| h.real == h.fake));
    }

    #[test]
    fn set_naming() {
        let mut set = DiscriminatorSet::new(&cfg(3), 0).unwrap();
        let names: Vec<String> = set.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"disc.core.conv0.weight".to_string()));
        assert!(names.contains(&"disc.pair.conv3.bn.gamma".to_string()));
        assert!(names.contains(&"disc.pen.fc.bias".to_string()));
        assert_eq!(set.head(Head::Pair).config().in_channels, 5);
    }
}
