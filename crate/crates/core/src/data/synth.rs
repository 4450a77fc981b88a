//! Deterministic multi-sequence lesion phantoms.
//!
//! Each phantom has an elliptical "brain" support (zero outside, as in
//! skull-stripped MRI), a rotated ellipsoidal penumbra and a concentric core
//! scaled strictly inside it. Intensity offsets differ per sequence: TMax
//! and TTP brighten the whole lesion with nearly equal core/penumbra
//! contrast, while DWI brightens only the core, so no single channel
//! separates all three classes.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Case, Modality, Volume};
use crate::error::{Error, Result};

const MIN_IN_PLANE: usize = 64;
const NOISE_STD: f64 = 0.25;

struct SequenceProfile {
    base: f64,
    penumbra: f64,
    core: f64,
}

fn profile(m: Modality) -> SequenceProfile {
    match m {
        Modality::TMax => SequenceProfile {
            base: 1.0,
            penumbra: 1.6,
            core: 1.8,
        },
        Modality::Ttp => SequenceProfile {
            base: 1.5,
            penumbra: 1.0,
            core: 0.7,
        },
        Modality::Dwi => SequenceProfile {
            base: 2.0,
            penumbra: 0.0,
            core: 1.6,
        },
    }
}

/// Generates phantom case `synth_<seed>` with the given (D, H, W) shape.
pub fn synth_case(seed: u64, shape: [usize; 3]) -> Result<Case> {
    let [d, h, w] = shape;
    if d == 0 || h < MIN_IN_PLANE || w < MIN_IN_PLANE {
        return Err(Error::InvalidConfig(format!(
            "phantom shape {shape:?} needs D >= 1 and H, W >= {MIN_IN_PLANE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf, df) = (h as f64, w as f64, d as f64);

    let cy = hf / 2.0 + rng.random_range(-0.08..0.08) * hf;
    let cx = wf / 2.0 + rng.random_range(-0.08..0.08) * wf;
    let cz = (df - 1.0) / 2.0;
    let ry = rng.random_range(0.16..0.24) * hf;
    let rx = rng.random_range(0.16..0.24) * wf;
    let rz = (0.75 * df).max(1.0);
    let theta = rng.random_range(0.0..PI);
    let core_scale = rng.random_range(0.45..0.6);
    let (sin_t, cos_t) = theta.sin_cos();

    // Squared normalized radius inside the penumbra ellipsoid.
    let lesion_r2 = |z: f64, y: f64, x: f64| {
        let (dy, dx) = (y - cy, x - cx);
        let u = cos_t * dy + sin_t * dx;
        let v = -sin_t * dy + cos_t * dx;
        (u / ry).powi(2) + (v / rx).powi(2) + ((z - cz) / rz).powi(2)
    };
    let in_brain = |y: f64, x: f64| {
        ((y - hf / 2.0) / (0.46 * hf)).powi(2) + ((x - wf / 2.0) / (0.44 * wf)).powi(2) <= 1.0
    };

    let mut penumbra = Array3::<f32>::zeros((d, h, w));
    let mut core = Array3::<f32>::zeros((d, h, w));
    for ((z, y, x), p) in penumbra.indexed_iter_mut() {
        let r2 = lesion_r2(z as f64, y as f64, x as f64);
        if r2 <= 1.0 {
            *p = 1.0;
            if r2 <= core_scale * core_scale {
                core[[z, y, x]] = 1.0;
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut modalities = Vec::with_capacity(3);
    for m in Modality::ALL {
        let prof = profile(m);
        let (fy, fx) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
        let (py, px) = (
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        );
        let mut data = Array3::<f32>::zeros((d, h, w));
        for ((z, y, x), v) in data.indexed_iter_mut() {
            let (yf, xf) = (y as f64, x as f64);
            if !in_brain(yf, xf) {
                continue;
            }
            let smooth =
                0.3 * (2.0 * PI * fy * yf / hf + py).sin() * (2.0 * PI * fx * xf / wf + px).cos();
            let offset = if core[[z, y, x]] > 0.0 {
                prof.core
            } else if penumbra[[z, y, x]] > 0.0 {
                prof.penumbra
            } else {
                0.0
            };
            let value = prof.base + smooth + offset + noise.sample(&mut rng);
            // Keep the brain support strictly nonzero.
            *v = if value.abs() < 1e-3 {
                1e-3
            } else {
                value as f32
            };
        }
        modalities.push(Volume::new(data)?);
    }
    let modalities: [Volume; 3] = modalities.try_into().expect("three sequences");
    Case::new(
        format!("synth_{seed}"),
        modalities,
        Volume::new(penumbra)?,
        Volume::new(core)?,
    )
}
