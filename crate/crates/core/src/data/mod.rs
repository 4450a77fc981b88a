//! Case ingestion and slice preparation.
//!
//! A [`Case`] holds the three perfusion/diffusion sequences used as network
//! input (TMax, TTP, DWI) together with binary penumbra and core masks. Cases
//! are cut into padded axial [`SliceSample`]s for 2-D training and split into
//! patient-level folds for cross-validation.

mod folds;
mod io;
mod slices;
mod synth;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array3, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{make_folds, FoldSplit};
pub use io::{
    load_case, read_manifest, read_nifti, read_rawf32, write_case, write_manifest, write_rawf32,
    Dataset, RawSidecar, DATA_ROOT_ENV,
};
pub use slices::{collate, extract_slices, Batch, Padding, SliceOptions, SliceSample};
pub use synth::synth_case;

/// Input sequences, in network channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    TMax,
    Ttp,
    Dwi,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::TMax, Modality::Ttp, Modality::Dwi];

    pub fn name(self) -> &'static str {
        match self {
            Modality::TMax => "TMax",
            Modality::Ttp => "TTP",
            Modality::Dwi => "DWI",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::MissingModality(s.to_string()))
    }
}

/// A 3-D scalar volume in (D, H, W) order with per-axis spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// (z, y, x) voxel size in millimetres.
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        Self::with_spacing(data, [1.0; 3])
    }

    pub fn with_spacing(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::ShapeError(format!(
                "volume shape {:?} must be strictly positive",
                data.shape()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("volume contains non-finite value {v}")));
        }
        Ok(Volume { data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.data.dim();
        [d, h, w]
    }
}

/// One patient: three co-registered sequences plus lesion masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    /// Indexed by [`Modality::channel`].
    pub modalities: [Volume; 3],
    pub penumbra_mask: Volume,
    pub core_mask: Volume,
}

impl Case {
    /// Builds a case, checking that all five volumes share one shape and
    /// binarizing the masks at 0.5.
    pub fn new(
        case_id: impl Into<String>,
        modalities: [Volume; 3],
        penumbra_mask: Volume,
        core_mask: Volume,
    ) -> Result<Self> {
        let named = [
            ("TMax", &modalities[0]),
            ("TTP", &modalities[1]),
            ("DWI", &modalities[2]),
            ("penumbra", &penumbra_mask),
            ("core", &core_mask),
        ];
        let reference = named[0].1.shape();
        if named.iter().any(|(_, v)| v.shape() != reference) {
            let listing = named
                .iter()
                .map(|(n, v)| format!("{n}={:?}", v.shape()))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::ShapeMismatch(listing));
        }
        let binarize = |v: Volume| Volume {
            data: v.data.mapv(|x| if x > 0.5 { 1.0 } else { 0.0 }),
            spacing: v.spacing,
        };
        Ok(Case {
            case_id: case_id.into(),
            modalities,
            penumbra_mask: binarize(penumbra_mask),
            core_mask: binarize(core_mask),
        })
    }

    pub fn modality(&self, m: Modality) -> &Volume {
        &self.modalities[m.channel()]
    }

    pub fn shape(&self) -> [usize; 3] {
        self.penumbra_mask.shape()
    }

    /// Exclusive three-class label volume (see [`encode_labels`]).
    pub fn labels(&self) -> Array3<u8> {
        encode_labels(self.penumbra_mask.data.view(), self.core_mask.data.view())
            .expect("case masks share a shape")
    }
}

/// Background / penumbra / core label values.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const PENUMBRA: u8 = 1;
    pub const CORE: u8 = 2;
    pub const NUM_CLASSES: usize = 3;
}

/// Merges the two binary masks into one label map; core wins where both are set.
pub fn encode_labels<D: Dimension>(
    penumbra: ArrayView<'_, f32, D>,
    core: ArrayView<'_, f32, D>,
) -> Result<Array<u8, D>> {
    if penumbra.shape() != core.shape() {
        return Err(Error::ShapeMismatch(format!(
            "penumbra={:?}, core={:?}",
            penumbra.shape(),
            core.shape()
        )));
    }
    Ok(Zip::from(&penumbra).and(&core).map_collect(|&p, &c| {
        if c > 0.5 {
            label::CORE
        } else if p > 0.5 {
            label::PENUMBRA
        } else {
            label::BACKGROUND
        }
    }))
}

/// Z-scores the nonzero support of a volume; zero voxels stay zero and a
/// constant support maps to all zeros.
pub fn normalize_modality(v: &Volume) -> Volume {
    let (n, sum) = v
        .data
        .iter()
        .filter(|&&x| x != 0.0)
        .fold((0usize, 0f64), |(n, s), &x| (n + 1, s + x as f64));
    let mut data = Array3::zeros(v.data.raw_dim());
    if n > 0 {
        let mean = sum / n as f64;
        let var = v
            .data
            .iter()
            .filter(|&&x| x != 0.0)
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if std > 1e-12 {
            Zip::from(&mut data).and(&v.data).for_each(|o, &x| {
                if x != 0.0 {
                    *o = ((x as f64 - mean) / std) as f32;
                }
            });
        }
    }
    Volume {
        data,
        spacing: v.spacing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array3};

    #[test]
    fn labels_core_takes_precedence() {
        let p = arr1(&[1.0f32, 0.0, 1.0, 0.0]);
        let c = arr1(&[1.0f32, 0.0, 0.0, 1.0]);
        let l = encode_labels(p.view(), c.view()).unwrap();
        assert_eq!(l.to_vec(), vec![2, 0, 1, 2]);
    }

    #[test]
    fn labels_shape_mismatch() {
        let p = Array3::<f32>::zeros((1, 2, 2));
        let c = Array3::<f32>::zeros((1, 2, 3));
        assert!(matches!(
            encode_labels(p.view(), c.view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume::new(Array3::from_elem((2, 3, 3), 7.0)).unwrap();
        assert!(normalize_modality(&v).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_value_support_maps_to_unit_scores() {
        let mut data = Array3::zeros((1, 1, 4));
        data[[0, 0, 1]] = 1.0;
        data[[0, 0, 3]] = 3.0;
        let n = normalize_modality(&Volume::new(data).unwrap());
        assert_eq!(n.data.as_slice().unwrap(), &[0.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalization_is_idempotent_on_support() {
        let data = Array3::from_shape_fn((2, 4, 5), |(z, y, x)| {
            if (y + x) % 3 == 0 {
                0.0
            } else {
                (z * 7 + y * 3 + x) as f32 * 0.37 + 1.0
            }
        });
        let once = normalize_modality(&Volume::new(data).unwrap());
        let twice = normalize_modality(&once);
        let support: Vec<f64> = twice
            .data
            .iter()
            .filter(|&&x| x != 0.0)
            .map(|&x| x as f64)
            .collect();
        let mean = support.iter().sum::<f64>() / support.len() as f64;
        let var = support.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / support.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn case_rejects_mismatched_shapes() {
        let v = |h, w| Volume::new(Array3::zeros((2, h, w))).unwrap();
        let err =
            Case::new("x", [v(96, 64), v(96, 64), v(96, 64)], v(96, 96), v(96, 64)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(s) if s.contains("penumbra=[2, 96, 96]")));
    }
}
