//! Checkpoints are safetensors archives of named `f32` arrays. The model
//! configuration and run provenance travel as JSON under the `strokeseg`
//! metadata key.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{DiscriminatorConfig, DiscriminatorSet, Segmenter, SegmenterConfig};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};

const META_KEY: &str = "strokeseg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub segmenter: SegmenterConfig,
    /// Base critic config (image channels only) when critics are stored.
    pub discriminator: Option<DiscriminatorConfig>,
    pub ablation: Option<String>,
    pub fold: Option<usize>,
    /// Held-out case ids the checkpoint was selected on.
    #[serde(default)]
    pub validation_ids: Vec<String>,
    /// Mean of penumbra and core validation Dice at selection time.
    pub validation_dice: Option<f64>,
    /// Boundary weighting used during training.
    #[serde(default)]
    pub boundary_factor: Option<f32>,
}

impl CheckpointMeta {
    pub fn for_segmenter(config: SegmenterConfig) -> Self {
        CheckpointMeta {
            segmenter: config,
            discriminator: None,
            ablation: None,
            fold: None,
            validation_ids: Vec::new(),
            validation_dice: None,
            boundary_factor: None,
        }
    }
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub segmenter: Segmenter,
    pub discriminators: Option<DiscriminatorSet>,
}

fn to_bytes(p: &Param) -> Vec<u8> {
    p.value.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_checkpoint(
    path: &Path,
    segmenter: &mut Segmenter,
    discriminators: Option<&mut DiscriminatorSet>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = segmenter
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.shape.clone(), to_bytes(p)))
        .collect();
    if let Some(d) = discriminators {
        named.extend(
            d.named_params()
                .into_iter()
                .map(|(n, p)| (n, p.shape.clone(), to_bytes(p))),
        );
    }
    let views = named
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::CheckpointMismatch(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(
        META_KEY.to_string(),
        serde_json::to_string(meta).expect("metadata serializes"),
    )]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    safetensors::serialize_to_file(views, Some(info), path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn restore(module: &mut impl Module, archive: &SafeTensors<'_>) -> Result<()> {
    for (name, p) in module.named_params() {
        let t = archive
            .tensor(&name)
            .map_err(|_| Error::CheckpointMismatch(format!("missing tensor `{name}`")))?;
        if t.dtype() != Dtype::F32 || t.shape() != p.shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor `{name}` is {:?} {:?}, model expects F32 {:?}",
                t.dtype(),
                t.shape(),
                p.shape
            )));
        }
        p.value = t
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::unreadable(path, e))?;
    let archive =
        SafeTensors::deserialize(&bytes).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::CheckpointMismatch("archive has no strokeseg metadata".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(meta_json).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;

    let mut segmenter = Segmenter::new(meta.segmenter.clone(), 0)
        .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    restore(&mut segmenter, &archive)?;
    let discriminators = match &meta.discriminator {
        Some(cfg) => {
            let mut set = DiscriminatorSet::new(cfg, 0)
                .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
            restore(&mut set, &archive)?;
            Some(set)
        }
        None => None,
    };
    Ok(Checkpoint {
        meta,
        segmenter,
        discriminators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn cfg() -> SegmenterConfig {
        SegmenterConfig {
            encoder_widths: vec![2, 4, 4, 4, 8, 8, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ck.safetensors");
        let mut seg = Segmenter::new(cfg(), 7).unwrap();
        seg.set_training(false);
        let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, y, x)| {
            ((c + y * x) % 7) as f32 * 0.1
        });
        let before = seg.forward(&x).unwrap();
        let dcfg = DiscriminatorConfig {
            in_channels: 3,
            base_width: 2,
            num_downsamples: 2,
        };
        let mut discs = DiscriminatorSet::new(&dcfg, 1).unwrap();
        let mut meta = CheckpointMeta::for_segmenter(cfg());
        meta.discriminator = Some(dcfg);
        meta.ablation = Some("BL5".into());
        save_checkpoint(&path, &mut seg, Some(&mut discs), &meta).unwrap();

        let mut ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, meta);
        ck.segmenter.set_training(false);
        assert_eq!(ck.segmenter.forward(&x).unwrap(), before);
        let mut restored = ck.discriminators.unwrap();
        let a: Vec<f32> = discs
            .named_params()
            .into_iter()
            .flat_map(|(_, p)| p.value.clone())
            .collect();
        let b: Vec<f32> = restored
            .named_params()
            .into_iter()
            .flat_map(|(_, p)| p.value.clone())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ck.safetensors");
        let mut seg = Segmenter::new(cfg(), 7).unwrap();
        let mut meta = CheckpointMeta::for_segmenter(cfg());
        meta.segmenter.encoder_widths[0] = 3;
        save_checkpoint(&path, &mut seg, None, &meta).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
