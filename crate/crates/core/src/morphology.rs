//! Binary morphology and the boundary weight map.
//!
//! The boundary band of a mask is `dilate(mask) AND NOT erode(mask)`: the
//! inner edge plus a one-pixel outer halo for a 3x3 element. Pixels of the
//! band of either lesion class receive the boundary factor, everything else
//! weight 1. Both operators treat pixels outside the image as background.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    /// Accepts any offset set that contains the origin and is symmetric under negation.
    pub fn new(offsets: Vec<(isize, isize)>) -> Result<Self> {
        if !offsets.contains(&(0, 0)) {
            return Err(Error::InvalidConfig(
                "structuring element must contain (0, 0)".into(),
            ));
        }
        if offsets
            .iter()
            .any(|&(dy, dx)| !offsets.contains(&(-dy, -dx)))
        {
            return Err(Error::InvalidConfig(
                "structuring element must be symmetric".into(),
            ));
        }
        Ok(StructuringElement { offsets })
    }

    /// Full 3x3 neighbourhood.
    pub fn square3() -> Self {
        let mut offsets = Vec::with_capacity(9);
        for dy in -1..=1 {
            for dx in -1..=1 {
                offsets.push((dy, dx));
            }
        }
        StructuringElement { offsets }
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square3()
    }
}

/// Boundary weighting parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub boundary_factor: f32,
    /// Dilation/erosion passes used to build the band.
    pub iterations: usize,
}

impl WeightSpec {
    pub fn new(boundary_factor: f32, iterations: usize) -> Result<Self> {
        if !(boundary_factor.is_finite() && boundary_factor >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "boundary factor must be >= 1, got {boundary_factor}"
            )));
        }
        if iterations == 0 {
            return Err(Error::InvalidConfig(
                "boundary iterations must be >= 1".into(),
            ));
        }
        Ok(WeightSpec {
            boundary_factor,
            iterations,
        })
    }
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec {
            boundary_factor: 10.0,
            iterations: 1,
        }
    }
}

fn neighbourhood(
    mask: ArrayView2<'_, bool>,
    se: &StructuringElement,
    init: bool,
    combine: impl Fn(bool, bool) -> bool,
) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        se.offsets.iter().fold(init, |acc, &(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            let v = yy >= 0
                && xx >= 0
                && (yy as usize) < h
                && (xx as usize) < w
                && mask[[yy as usize, xx as usize]];
            combine(acc, v)
        })
    })
}

pub fn dilate(mask: ArrayView2<'_, bool>, se: &StructuringElement) -> Array2<bool> {
    neighbourhood(mask, se, false, |a, b| a || b)
}

pub fn erode(mask: ArrayView2<'_, bool>, se: &StructuringElement) -> Array2<bool> {
    neighbourhood(mask, se, true, |a, b| a && b)
}

fn repeat(
    mask: ArrayView2<'_, bool>,
    se: &StructuringElement,
    iterations: usize,
    op: fn(ArrayView2<'_, bool>, &StructuringElement) -> Array2<bool>,
) -> Array2<bool> {
    let mut out = op(mask, se);
    for _ in 1..iterations {
        out = op(out.view(), se);
    }
    out
}

/// `dilate(mask) AND NOT erode(mask)`, each applied `iterations` times.
pub fn boundary_band(
    mask: ArrayView2<'_, bool>,
    se: &StructuringElement,
    iterations: usize,
) -> Array2<bool> {
    let iterations = iterations.max(1);
    let mut band = repeat(mask, se, iterations, dilate);
    let eroded = repeat(mask, se, iterations, erode);
    Zip::from(&mut band)
        .and(&eroded)
        .for_each(|b, &e| *b = *b && !e);
    band
}

/// Weight `boundary_factor` on the union of the penumbra and core bands, 1 elsewhere.
pub fn weight_map(labels: ArrayView2<'_, u8>, spec: &WeightSpec) -> Array2<f32> {
    let se = StructuringElement::square3();
    let band_of =
        |class: u8| boundary_band(labels.mapv(|l| l == class).view(), &se, spec.iterations);
    let pen = band_of(label::PENUMBRA);
    let core = band_of(label::CORE);
    Zip::from(&pen)
        .and(&core)
        .map_collect(|&p, &c| if p || c { spec.boundary_factor } else { 1.0 })
}
