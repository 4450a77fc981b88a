//! Residual SUMNet-style encoder/decoder.
//!
//! Encoder: VGG11 layout of 3x3 conv + BN + ReLU blocks in five stages
//! (1, 1, 2, 2, 2 convolutions), each stage followed by a 2x2 max pool that
//! keeps its argmax indices. With `residual`, every encoder block computes
//! `relu(bn(conv(x)) + shortcut(x))`, the shortcut being the identity when
//! widths agree and a 1x1 projection otherwise.
//!
//! Decoder: per stage, deepest first, unpool with the stored indices,
//! concatenate the stage's pre-pool encoder features, then the same number
//! of conv + BN + ReLU blocks, the last narrowing to the width expected by
//! the next unpooling. A final 1x1 conv emits the class logits.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, max_pool2x2, max_pool2x2_backward, max_unpool2x2,
    max_unpool2x2_backward, split_channels, BatchNorm2d, Conv2d, Module, Param, PoolIndices, Relu,
};

/// Convolutions per encoder stage.
pub const STAGE_LAYOUT: [usize; 5] = [1, 1, 2, 2, 2];

/// Spatial sizes must be divisible by this (five 2x poolings).
pub const SPATIAL_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub residual: bool,
    pub batch_norm: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            in_channels: 3,
            num_classes: 3,
            encoder_widths: vec![64, 128, 256, 256, 512, 512, 512, 512],
            residual: true,
            batch_norm: true,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let convs: usize = STAGE_LAYOUT.iter().sum();
        if self.encoder_widths.len() != convs {
            return Err(Error::InvalidConfig(format!(
                "encoder_widths needs {convs} entries, got {}",
                self.encoder_widths.len()
            )));
        }
        if self.encoder_widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::InvalidConfig(
                "channel counts must be positive".into(),
            ));
        }
        if self.num_classes != 3 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be 3 (background, penumbra, core), got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Encoder widths grouped by stage.
    pub fn stages(&self) -> Vec<Vec<usize>> {
        let mut it = self.encoder_widths.iter().copied();
        STAGE_LAYOUT
            .iter()
            .map(|&n| it.by_ref().take(n).collect())
            .collect()
    }
}

/// 3x3 conv followed by optional batch norm; no activation.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

impl ConvBn {
    fn new(cin: usize, cout: usize, batch_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        ConvBn {
            conv: Conv2d::new(cin, cout, 3, 1, 1, !batch_norm, rng),
            bn: batch_norm.then(|| BatchNorm2d::new(cout)),
        }
    }

    fn set_training(&mut self, training: bool) {
        if let Some(bn) = self.bn.as_mut() {
            bn.set_training(training);
        }
    }

    fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let z = self.conv.forward(x);
        match self.bn.as_mut() {
            Some(bn) => bn.forward(&z),
            None => z,
        }
    }

    fn backward(&mut self, dz: &Array4<f32>) -> Array4<f32> {
        let d = match self.bn.as_mut() {
            Some(bn) => bn.backward(dz),
            None => dz.clone(),
        };
        self.conv.backward(&d)
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.params_mut(prefix, out);
        if let Some(bn) = self.bn.as_mut() {
            bn.params_mut(&join(prefix, "bn"), out);
        }
    }
}

#[derive(Clone, Debug)]
enum Shortcut {
    Identity,
    Projection(Box<Conv2d>),
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    body: ConvBn,
    shortcut: Option<Shortcut>,
    relu: Relu,
}

impl EncoderBlock {
    fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let mut z = self.body.forward(x);
        match self.shortcut.as_mut() {
            Some(Shortcut::Identity) => z += x,
            Some(Shortcut::Projection(p)) => z += &p.forward(x),
            None => {}
        }
        self.relu.forward(&z)
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let dz = self.relu.backward(dy);
        let mut dx = self.body.backward(&dz);
        match self.shortcut.as_mut() {
            Some(Shortcut::Identity) => dx += &dz,
            Some(Shortcut::Projection(p)) => dx += &p.backward(&dz),
            None => {}
        }
        dx
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.body.params_mut(prefix, out);
        if let Some(Shortcut::Projection(p)) = self.shortcut.as_mut() {
            p.params_mut(&join(prefix, "shortcut"), out);
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    body: ConvBn,
    relu: Relu,
}

impl DecoderBlock {
    fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let z = self.body.forward(x);
        self.relu.forward(&z)
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let dz = self.relu.backward(dy);
        self.body.backward(&dz)
    }
}

/// The segmentation network.
#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
    encoder: Vec<Vec<EncoderBlock>>,
    decoder: Vec<Vec<DecoderBlock>>,
    head: Conv2d,
    training: bool,
    pools: Vec<PoolIndices>,
    skip_channels: Vec<usize>,
}

/// Builds a freshly initialized segmenter (He-uniform convs, unit BN gains).
pub fn build_segmenter(config: &SegmenterConfig, seed: u64) -> Result<Segmenter> {
    Segmenter::new(config.clone(), seed)
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn = config.batch_norm;
        let stages = config.stages();

        let mut cin = config.in_channels;
        let mut encoder = Vec::with_capacity(stages.len());
        for widths in &stages {
            let blocks = widths
                .iter()
                .map(|&w| {
                    let body = ConvBn::new(cin, w, bn, &mut rng);
                    let shortcut = config.residual.then(|| {
                        if cin == w {
                            Shortcut::Identity
                        } else {
                            Shortcut::Projection(Box::new(Conv2d::new(
                                cin, w, 1, 1, 0, true, &mut rng,
                            )))
                        }
                    });
                    cin = w;
                    EncoderBlock {
                        body,
                        shortcut,
                        relu: Relu::default(),
                    }
                })
                .collect();
            encoder.push(blocks);
        }

        let stage_out: Vec<usize> = stages
            .iter()
            .map(|s| *s.last().expect("non-empty stage"))
            .collect();
        let mut decoder = Vec::with_capacity(stages.len());
        for (s, widths) in stages.iter().enumerate() {
            let width = stage_out[s];
            let target = if s == 0 { width } else { stage_out[s - 1] };
            let n = widths.len();
            let blocks = (0..n)
                .map(|j| {
                    let cin = if j == 0 { 2 * width } else { width };
                    let cout = if j + 1 == n { target } else { width };
                    DecoderBlock {
                        body: ConvBn::new(cin, cout, bn, &mut rng),
                        relu: Relu::default(),
                    }
                })
                .collect();
            decoder.push(blocks);
        }
        let head = Conv2d::new(stage_out[0], config.num_classes, 1, 1, 0, true, &mut rng);

        Ok(Segmenter {
            config,
            encoder,
            decoder,
            head,
            training: true,
            pools: Vec::new(),
            skip_channels: Vec::new(),
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
        for b in self.encoder.iter_mut().flatten() {
            b.body.set_training(training);
        }
        for b in self.decoder.iter_mut().flatten() {
            b.body.set_training(training);
        }
    }

    /// Validates an input batch shape.
    pub fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::ShapeError(format!(
                "segmenter expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::ShapeError(format!(
                "spatial size {h}x{w} must be a positive multiple of {SPATIAL_MULTIPLE}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeError("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// (B, C_in, H, W) -> (B, num_classes, H, W) logits.
    pub fn forward(&mut self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        self.pools.clear();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for stage in &mut self.encoder {
            for block in stage.iter_mut() {
                h = block.forward(&h);
            }
            let (pooled, idx) = max_pool2x2(&h)?;
            skips.push(h);
            self.pools.push(idx);
            h = pooled;
        }
        self.skip_channels = skips.iter().map(|s| s.dim().1).collect();
        for (s, stage) in self.decoder.iter_mut().enumerate().rev() {
            let up = max_unpool2x2(&h, &self.pools[s])?;
            h = concat_channels(&up, &skips[s]);
            for block in stage.iter_mut() {
                h = block.forward(&h);
            }
        }
        Ok(self.head.forward(&h))
    }

    /// Backpropagates logit gradients, accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: &Array4<f32>) -> Array4<f32> {
        assert_eq!(
            self.pools.len(),
            self.encoder.len(),
            "backward without forward"
        );
        let mut d = self.head.backward(dlogits);
        let mut dskips = Vec::with_capacity(self.decoder.len());
        for (s, stage) in self.decoder.iter_mut().enumerate() {
            for block in stage.iter_mut().rev() {
                d = block.backward(&d);
            }
            let unpooled_channels = d.dim().1 - self.skip_channels[s];
            let (dup, dskip) = split_channels(&d, unpooled_channels);
            dskips.push(dskip);
            d = max_unpool2x2_backward(&dup, &self.pools[s]);
        }
        for (s, stage) in self.encoder.iter_mut().enumerate().rev() {
            let mut dh = max_pool2x2_backward(&d, &self.pools[s]);
            dh += &dskips[s];
            for block in stage.iter_mut().rev() {
                dh = block.backward(&dh);
            }
            d = dh;
        }
        d
    }

    /// Zeros all projection-shortcut weights and biases.
    pub fn zero_projection_shortcuts(&mut self) {
        for block in self.encoder.iter_mut().flatten() {
            if let Some(Shortcut::Projection(p)) = block.shortcut.as_mut() {
                p.weight.value.fill(0.0);
                if let Some(b) = p.bias.as_mut() {
                    b.value.fill(0.0);
                }
            }
        }
    }
}

impl Module for Segmenter {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.params_mut(&join(prefix, &format!("encoder.block{i}.conv{j}")), out);
            }
        }
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block
                    .body
                    .params_mut(&join(prefix, &format!("decoder.block{i}.conv{j}")), out);
            }
        }
        self.head.params_mut(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(residual: bool) -> SegmenterConfig {
        SegmenterConfig {
            encoder_widths: vec![4, 8, 8, 8, 16, 16, 16, 16],
            residual,
            ..Default::default()
        }
    }

    #[test]
    fn default_layout_is_vgg11() {
        let cfg = SegmenterConfig::default();
        assert_eq!(
            cfg.stages(),
            vec![
                vec![64],
                vec![128],
                vec![256, 256],
                vec![512, 512],
                vec![512, 512]
            ]
        );
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(true);
        cfg.encoder_widths.pop();
        assert!(matches!(
            build_segmenter(&cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
        let cfg = SegmenterConfig {
            num_classes: 2,
            ..small(true)
        };
        assert!(matches!(
            build_segmenter(&cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn shape_contract() {
        let mut m = build_segmenter(&small(true), 1).unwrap();
        let y = m.forward(&Array4::zeros((2, 3, 64, 96))).unwrap();
        assert_eq!(y.dim(), (2, 3, 64, 96));
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(matches!(
            m.forward(&Array4::zeros((1, 3, 48, 64))),
            Err(Error::ShapeError(_))
        ));
        assert!(matches!(
            m.forward(&Array4::zeros((1, 4, 64, 64))),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn residual_adds_projection_parameters() {
        let plain = build_segmenter(&small(false), 0).unwrap().num_trainable();
        let res = build_segmenter(&small(true), 0).unwrap().num_trainable();
        assert!(plain < res);
        assert_eq!(
            res,
            build_segmenter(&small(true), 9).unwrap().num_trainable()
        );
    }

    #[test]
    fn parameter_names_follow_scheme() {
        let mut m = build_segmenter(&small(true), 0).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"encoder.block0.conv0.weight".to_string()));
        assert!(names.contains(&"encoder.block0.conv0.shortcut.weight".to_string()));
        assert!(names.contains(&"encoder.block2.conv1.bn.running_var".to_string()));
        assert!(names.contains(&"decoder.block4.conv1.bn.gamma".to_string()));
        assert!(names.contains(&"head.bias".to_string()));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }
}
