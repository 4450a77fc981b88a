//! Adversarial training and the ablation grid.

mod run;
mod step;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SliceOptions;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{DiscriminatorConfig, SegmenterConfig};
use crate::morphology::WeightSpec;

pub use run::{fold_dir, train, train_fold, FoldResult, FoldSelection, LogRecord, TrainLog};
pub use step::Trainer;

/// The eight compared configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationTag {
    #[serde(rename = "BL1")]
    Bl1,
    #[serde(rename = "BL2")]
    Bl2,
    #[serde(rename = "BL3")]
    Bl3,
    #[serde(rename = "BL4")]
    Bl4,
    #[serde(rename = "BL5")]
    Bl5,
    #[serde(rename = "BL6")]
    Bl6,
    #[serde(rename = "BL7")]
    Bl7,
    #[serde(rename = "PROPOSED")]
    Proposed,
}

/// What an ablation switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationFlags {
    pub residual: bool,
    pub adversarial: bool,
    /// Lovász-Softmax and boundary NLL on top of cross-entropy.
    pub extra_losses: bool,
}

impl AblationTag {
    pub const ALL: [AblationTag; 8] = [
        AblationTag::Bl1,
        AblationTag::Bl2,
        AblationTag::Bl3,
        AblationTag::Bl4,
        AblationTag::Bl5,
        AblationTag::Bl6,
        AblationTag::Bl7,
        AblationTag::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationTag::Bl1 => "BL1",
            AblationTag::Bl2 => "BL2",
            AblationTag::Bl3 => "BL3",
            AblationTag::Bl4 => "BL4",
            AblationTag::Bl5 => "BL5",
            AblationTag::Bl6 => "BL6",
            AblationTag::Bl7 => "BL7",
            AblationTag::Proposed => "PROPOSED",
        }
    }

    /// Column heading used in result tables.
    pub fn column(self) -> &'static str {
        match self {
            AblationTag::Proposed => "Proposed",
            other => other.name(),
        }
    }

    pub fn flags(self) -> AblationFlags {
        // The tags enumerate {residual} x {adversarial} x {extra losses}.
        let i = self as u8;
        AblationFlags {
            residual: i & 0b100 != 0,
            adversarial: i & 0b010 != 0,
            extra_losses: i & 0b001 != 0,
        }
    }
}

impl fmt::Display for AblationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationTag::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownTag(s.to_string()))
    }
}

/// Flags for a tag given by name.
pub fn ablation_flags(tag: &str) -> Result<AblationFlags> {
    Ok(tag.parse::<AblationTag>()?.flags())
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ablation: AblationTag,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop a fold after this many optimizer steps (0 = unlimited).
    pub max_iterations: usize,
    pub lr_segmenter: f32,
    pub lr_discriminators: f32,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Only `cpu` is supported.
    pub device: String,
    pub checkpoint_dir: PathBuf,
    pub boundary_factor: f32,
    pub boundary_iterations: usize,
    pub drop_empty_slices: bool,
    pub encoder_widths: Vec<usize>,
    pub batch_norm: bool,
    pub disc_base_width: usize,
    pub disc_downsamples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ablation: AblationTag::Proposed,
            epochs: 50,
            batch_size: 4,
            max_iterations: 0,
            lr_segmenter: 1e-4,
            lr_discriminators: 1e-4,
            loss_weights: LossWeights::default(),
            seed: 0,
            device: "cpu".into(),
            checkpoint_dir: PathBuf::from("runs"),
            boundary_factor: 10.0,
            boundary_iterations: 1,
            drop_empty_slices: false,
            encoder_widths: SegmenterConfig::default().encoder_widths,
            batch_norm: true,
            disc_base_width: 64,
            disc_downsamples: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr_segmenter > 0.0 && self.lr_discriminators > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if !self.device.eq_ignore_ascii_case("cpu") {
            return Err(Error::InvalidConfig(format!(
                "unsupported device `{}` (only cpu)",
                self.device
            )));
        }
        self.loss_weights.validate()?;
        self.weight_spec()?;
        self.segmenter_config().validate()?;
        self.discriminator_config().validate()
    }

    pub fn flags(&self) -> AblationFlags {
        self.ablation.flags()
    }

    /// Configured weights with terms the ablation disables forced to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let f = self.flags();
        let w = self.loss_weights;
        LossWeights {
            ce: w.ce,
            ls: if f.extra_losses { w.ls } else { 0.0 },
            bd: if f.extra_losses { w.bd } else { 0.0 },
            adv: if f.adversarial { w.adv } else { 0.0 },
        }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            encoder_widths: self.encoder_widths.clone(),
            residual: self.flags().residual,
            batch_norm: self.batch_norm,
            ..Default::default()
        }
    }

    /// Base critic config; `in_channels` counts image channels only.
    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: 3,
            base_width: self.disc_base_width,
            num_downsamples: self.disc_downsamples,
        }
    }

    pub fn weight_spec(&self) -> Result<WeightSpec> {
        WeightSpec::new(self.boundary_factor, self.boundary_iterations)
    }

    pub fn slice_options(&self) -> Result<SliceOptions> {
        Ok(SliceOptions {
            weights: self.weight_spec()?,
            drop_empty: self.drop_empty_slices,
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn flag_table() {
        let f = |r, a, e| AblationFlags {
            residual: r,
            adversarial: a,
            extra_losses: e,
        };
        assert_eq!(ablation_flags("BL1").unwrap(), f(false, false, false));
        assert_eq!(ablation_flags("BL2").unwrap(), f(false, false, true));
        assert_eq!(ablation_flags("BL3").unwrap(), f(false, true, false));
        assert_eq!(ablation_flags("BL4").unwrap(), f(false, true, true));
        assert_eq!(ablation_flags("BL5").unwrap(), f(true, false, false));
        assert_eq!(ablation_flags("BL6").unwrap(), f(true, false, true));
        assert_eq!(ablation_flags("BL7").unwrap(), f(true, true, false));
        assert_eq!(ablation_flags("PROPOSED").unwrap(), f(true, true, true));
        assert_eq!(ablation_flags("proposed").unwrap(), f(true, true, true));
    }

    #[test]
    fn grid_is_bijective() {
        let set: HashSet<_> = AblationTag::ALL.iter().map(|t| t.flags()).collect();
        assert_eq!(set.len(), 8);
    }

    #[test]
    fn unknown_tag() {
        match ablation_flags("BL9") {
            Err(Error::UnknownTag(t)) => assert_eq!(t, "BL9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn effective_weights_follow_flags() {
        let cfg = TrainConfig {
            ablation: AblationTag::Bl1,
            ..Default::default()
        };
        let w = cfg.effective_weights();
        assert_eq!((w.ls, w.bd, w.adv), (0.0, 0.0, 0.0));
        let cfg = TrainConfig {
            ablation: AblationTag::Bl4,
            ..Default::default()
        };
        let w = cfg.effective_weights();
        assert_eq!((w.ls, w.bd, w.adv), (1.0, 1.0, 0.1));
        assert!(!cfg.segmenter_config().residual);
    }

    #[test]
    fn tag_serde_names() {
        assert_eq!(
            serde_json::to_string(&AblationTag::Proposed).unwrap(),
            "\"PROPOSED\""
        );
        assert_eq!(
            serde_json::from_str::<AblationTag>("\"BL3\"").unwrap(),
            AblationTag::Bl3
        );
    }
}
