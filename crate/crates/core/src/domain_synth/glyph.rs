use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttributeValue, DomainDataset, DomainRole, DomainSample};
use crate::error::{invalid_arg, Result};

pub const MAX_GLYPH_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub num_classes: usize,
    /// Standard deviation of additive pixel noise (clamped to `[0, 1]` afterwards).
    pub noise_std: f64,
    pub base_seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self { num_classes: 4, noise_std: 0.1, base_seed: 0 }
    }
}

fn in_box(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    u >= u0 && u <= u1 && v >= v0 && v <= v1
}

// Shapes live in [-1, 1]^2 with v pointing up. None of them is invariant
// under a half turn, so rotation always changes the raster.
fn inside(class: usize, u: f64, v: f64) -> bool {
    match class {
        // L
        0 => in_box(u, v, -0.6, -0.3, -0.7, 0.7) || in_box(u, v, -0.6, 0.6, -0.7, -0.4),
        // T
        1 => in_box(u, v, -0.6, 0.6, 0.4, 0.7) || in_box(u, v, -0.15, 0.15, -0.7, 0.7),
        // right triangle, lower-left
        2 => u >= -0.6 && v >= -0.6 && u + v <= 0.0,
        // F
        3 => {
            in_box(u, v, -0.6, -0.3, -0.7, 0.7)
                || in_box(u, v, -0.6, 0.6, 0.4, 0.7)
                || in_box(u, v, -0.6, 0.3, -0.1, 0.2)
        }
        // C, open to the right
        4 => {
            let r = (u * u + v * v).sqrt();
            (0.4..=0.75).contains(&r) && !(u > 0.2 && v.abs() < 0.3)
        }
        // diagonal stroke with a dot
        5 => {
            ((u - v).abs() < 0.2 && u.abs() <= 0.7 && v.abs() <= 0.7)
                || ((u - 0.5).powi(2) + (v + 0.5).powi(2)).sqrt() < 0.2
        }
        // off-center cross
        6 => in_box(u, v, 0.05, 0.35, -0.6, 0.7) || in_box(u, v, -0.6, 0.7, 0.05, 0.35),
        // P
        7 => {
            in_box(u, v, -0.6, -0.3, -0.7, 0.7)
                || in_box(u, v, -0.6, 0.5, 0.4, 0.7)
                || in_box(u, v, -0.6, 0.5, 0.0, 0.2)
                || in_box(u, v, 0.3, 0.5, 0.0, 0.7)
        }
        _ => false,
    }
}

/// Noise-free, unrotated raster (row-major, row 0 at the top) for `class`.
pub fn canonical_glyph(class: usize, resolution: usize) -> Vec<f64> {
    let c = (resolution as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let u = (j as f64 - c) / c;
            let v = (c - i as f64) / c;
            out.push(if inside(class, u, v) { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Counterclockwise rotation about the raster center with nearest-neighbor
/// resampling; pixels mapped from outside the raster become 0.
pub fn rotate_raster(raster: &[f64], resolution: usize, angle: AttributeValue) -> Vec<f64> {
    let c = (resolution as f64 - 1.0) / 2.0;
    let (s, co) = angle.get().to_radians().sin_cos();
    let mut out = vec![0.0; resolution * resolution];
    for i in 0..resolution {
        for j in 0..resolution {
            let x = j as f64 - c;
            let y = c - i as f64;
            // inverse rotation finds the source pixel
            let xs = co * x + s * y;
            let ys = -s * x + co * y;
            let js = (xs + c).round();
            let is = (c - ys).round();
            if js >= 0.0 && is >= 0.0 && (js as usize) < resolution && (is as usize) < resolution {
                out[i * resolution + j] = raster[is as usize * resolution + js as usize];
            }
        }
    }
    out
}

pub fn render_glyph_domain(
    spec: &GlyphSpec,
    attribute: AttributeValue,
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<DomainDataset> {
    if resolution < 8 {
        return invalid_arg(format!("glyph resolution must be >= 8, got {resolution}"));
    }
    if n < 1 {
        return invalid_arg("render_glyph_domain needs n >= 1");
    }
    if !(2..=MAX_GLYPH_CLASSES).contains(&spec.num_classes) {
        return invalid_arg(format!("glyph benchmark supports 2..={MAX_GLYPH_CLASSES} classes"));
    }
    if !(spec.noise_std >= 0.0) {
        return invalid_arg("noise_std must be non-negative");
    }
    let glyphs: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|k| rotate_raster(&canonical_glyph(k, resolution), resolution, attribute))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let y = rng.gen_range(0..spec.num_classes);
            let x = glyphs[y]
                .iter()
                .map(|&p| {
                    let z: f64 = rng.sample(StandardNormal);
                    (p + spec.noise_std * z).clamp(0.0, 1.0)
                })
                .collect();
            DomainSample { x, y: Some(y) }
        })
        .collect();
    Ok(DomainDataset { samples, attribute, labeled: true, role: DomainRole::Source })
}
