use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::data::{label, Volume};
use crate::error::{Error, Result};
use crate::morphology::{erode, StructuringElement};

pub const PENUMBRA_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
pub const CORE_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// File name for slice `z`; the legend is part of the name.
pub fn overlay_name(z: usize) -> String {
    format!("slice_{z:03}_pen-yellow_core-red.png")
}

/// Mask pixels with at least one 8-neighbour outside the mask.
fn contour(mask: ArrayView2<'_, bool>) -> Array2<bool> {
    let inner = erode(mask, &StructuringElement::square3());
    let mut out = mask.to_owned();
    out.zip_mut_with(&inner, |m, &i| *m &= !i);
    out
}

/// Grayscale background with 1-px lesion outlines: penumbra (the whole
/// predicted lesion) in yellow, core in red on top.
pub fn render_overlay(
    background: ArrayView2<'_, f32>,
    pred: ArrayView2<'_, u8>,
    range: (f32, f32),
) -> RgbImage {
    let (h, w) = background.dim();
    let (lo, hi) = range;
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = ((background[[y as usize, x as usize]] - lo) * scale)
            .round()
            .clamp(0.0, 255.0) as u8;
        Rgb([v, v, v])
    });
    let layers = [
        (pred.mapv(|v| v != label::BACKGROUND), PENUMBRA_COLOR),
        (pred.mapv(|v| v == label::CORE), CORE_COLOR),
    ];
    for (mask, color) in layers {
        for ((y, x), &on) in contour(mask.view()).indexed_iter() {
            if on {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    img
}

/// Writes one overlay per axial slice into `dir` and returns the paths.
pub fn write_overlays(dir: &Path, background: &Volume, pred: &Array3<u8>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let range = background
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    pred.axis_iter(Axis(0))
        .zip(background.data.axis_iter(Axis(0)))
        .enumerate()
        .map(|(z, (p, b))| {
            let path = dir.join(overlay_name(z));
            render_overlay(b, p, range)
                .save(&path)
                .map_err(|e| Error::unreadable(&path, e))?;
            Ok(path)
        })
        .collect()
}
