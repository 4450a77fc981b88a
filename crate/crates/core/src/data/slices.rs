use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};

use super::{normalize_modality, Case, Modality};
use crate::morphology::{weight_map, WeightSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SliceOptions {
    pub pad_to_multiple: usize,
    pub weights: WeightSpec,
    /// Skip slices with no lesion voxels.
    pub drop_empty: bool,
}

impl Default for SliceOptions {
    fn default() -> Self {
        SliceOptions {
            pad_to_multiple: 32,
            weights: WeightSpec::default(),
            drop_empty: false,
        }
    }
}

/// Where the original slice sits inside the padded one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Padding {
    pub fn crop<'a, T>(&self, padded: ArrayView2<'a, T>) -> ArrayView2<'a, T> {
        padded.slice_move(s![
            self.top..self.top + self.height,
            self.left..self.left + self.width
        ])
    }
}

/// One 2-D training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    /// (3, H, W), channels in [`Modality::ALL`] order.
    pub input: Array3<f32>,
    pub labels: Array2<u8>,
    pub boundary_weights: Array2<f32>,
    pub case_id: String,
    pub slice_index: usize,
    pub padding: Padding,
}

fn next_multiple(n: usize, m: usize) -> usize {
    if m <= 1 {
        n
    } else {
        n.div_ceil(m) * m
    }
}

/// Cuts a case into normalized, padded axial slices.
pub fn extract_slices(case: &Case, opts: &SliceOptions) -> Vec<SliceSample> {
    let [depth, h, w] = case.shape();
    let ph = next_multiple(h, opts.pad_to_multiple);
    let pw = next_multiple(w, opts.pad_to_multiple);
    let padding = Padding {
        top: (ph - h) / 2,
        left: (pw - w) / 2,
        height: h,
        width: w,
    };
    let region = s![padding.top..padding.top + h, padding.left..padding.left + w];
    let normalized: Vec<_> = Modality::ALL
        .iter()
        .map(|&m| normalize_modality(case.modality(m)))
        .collect();
    let labels = case.labels();

    (0..depth)
        .filter_map(|z| {
            let slice_labels = labels.index_axis(Axis(0), z);
            if opts.drop_empty && slice_labels.iter().all(|&l| l == 0) {
                return None;
            }
            let mut input = Array3::zeros((3, ph, pw));
            for (c, vol) in normalized.iter().enumerate() {
                input
                    .index_axis_mut(Axis(0), c)
                    .slice_mut(region)
                    .assign(&vol.data.index_axis(Axis(0), z));
            }
            let mut padded_labels = Array2::zeros((ph, pw));
            padded_labels.slice_mut(region).assign(&slice_labels);
            let mut weights = Array2::ones((ph, pw));
            weights
                .slice_mut(region)
                .assign(&weight_map(slice_labels, &opts.weights));
            Some(SliceSample {
                input,
                labels: padded_labels,
                boundary_weights: weights,
                case_id: case.case_id.clone(),
                slice_index: z,
                padding,
            })
        })
        .collect()
}

/// Stacked mini-batch arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// (B, 3, H, W)
    pub inputs: Array4<f32>,
    /// (B, H, W)
    pub labels: Array3<u8>,
    /// (B, H, W)
    pub weights: Array3<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks samples, padding bottom/right to the largest slice in the batch.
pub fn collate(samples: &[&SliceSample]) -> Batch {
    let h = samples.iter().map(|s| s.labels.nrows()).max().unwrap_or(0);
    let w = samples.iter().map(|s| s.labels.ncols()).max().unwrap_or(0);
    let b = samples.len();
    let mut inputs = Array4::zeros((b, 3, h, w));
    let mut labels = Array3::zeros((b, h, w));
    let mut weights = Array3::ones((b, h, w));
    for (i, smp) in samples.iter().enumerate() {
        let (sh, sw) = smp.labels.dim();
        inputs.slice_mut(s![i, .., ..sh, ..sw]).assign(&smp.input);
        labels.slice_mut(s![i, ..sh, ..sw]).assign(&smp.labels);
        weights
            .slice_mut(s![i, ..sh, ..sw])
            .assign(&smp.boundary_weights);
    }
    Batch {
        inputs,
        labels,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_case, Volume};

    fn blank_case(shape: (usize, usize, usize)) -> Case {
        let v = || Volume::new(Array3::zeros(shape)).unwrap();
        Case::new("blank", [v(), v(), v()], v(), v()).unwrap()
    }

    #[test]
    fn one_sample_per_axial_slice() {
        let case = synth_case(3, [2, 96, 96]).unwrap();
        let samples = extract_slices(&case, &SliceOptions::default());
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].input.dim(), (3, 96, 96));
        assert_eq!(samples[1].slice_index, 1);
    }

    #[test]
    fn pads_symmetrically_to_multiple_of_32() {
        let samples = extract_slices(&blank_case((1, 90, 90)), &SliceOptions::default());
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].input.dim(), (3, 96, 96));
        assert_eq!(
            samples[0].padding,
            Padding {
                top: 3,
                left: 3,
                height: 90,
                width: 90
            }
        );
    }

    #[test]
    fn background_slice_has_unit_weights() {
        let samples = extract_slices(&blank_case((1, 64, 64)), &SliceOptions::default());
        assert!(samples[0].labels.iter().all(|&l| l == 0));
        assert!(samples[0].boundary_weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn drop_empty_skips_background_slices() {
        let opts = SliceOptions {
            drop_empty: true,
            ..Default::default()
        };
        assert!(extract_slices(&blank_case((2, 64, 64)), &opts).is_empty());
    }

    #[test]
    fn collate_pads_to_largest() {
        let a = extract_slices(&blank_case((1, 64, 64)), &SliceOptions::default());
        let b = extract_slices(&blank_case((1, 64, 96)), &SliceOptions::default());
        let batch = collate(&[&a[0], &b[0]]);
        assert_eq!(batch.inputs.dim(), (2, 3, 64, 96));
        assert_eq!(batch.weights[[0, 10, 80]], 1.0);
    }
}
