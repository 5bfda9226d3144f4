//! Synthetic domain families indexed by a continuous attribute.
//!
//! Two benchmarks are provided: 2-D Gaussian constellations rotated by the
//! attribute angle, and procedural glyph rasters rotated the same way. The
//! [`split`] module assigns grid domains to source, probe and unseen roles.

mod constellation;
mod glyph;
pub mod io;
pub mod split;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{invalid_arg, Result};

pub use constellation::{make_constellation, make_constellation_with, rotate_point, sample_domain, ConstellationParams, ConstellationSpec};
pub use glyph::{canonical_glyph, render_glyph_domain, rotate_raster, GlyphSpec};
pub use split::{build_split, PositionKind, SegmentKind, SplitManifest, SplitRequest};

/// Closed range of admissible attribute values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for AttributeRange {
    fn default() -> Self {
        Self { lo: 0.0, hi: 180.0 }
    }
}

impl AttributeRange {
    pub fn value(&self, v: f64) -> Result<AttributeValue> {
        if !(v >= self.lo && v <= self.hi) {
            return invalid_arg(format!("attribute {v} outside [{}, {}]", self.lo, self.hi));
        }
        Ok(AttributeValue(v))
    }

    /// `n` equally spaced attributes covering the range, endpoints included.
    pub fn grid(&self, n: usize) -> Result<Vec<f64>> {
        if n < 2 {
            return invalid_arg("attribute grid needs at least 2 points");
        }
        let step = (self.hi - self.lo) / (n - 1) as f64;
        Ok((0..n).map(|i| self.lo + step * i as f64).collect())
    }
}

/// Attribute value (degrees for the rotation benchmarks).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeValue(f64);

impl AttributeValue {
    /// Unchecked constructor for angles; rotation itself is defined for any value.
    pub fn degrees(v: f64) -> Self {
        Self(v)
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    ProbeTarget,
    UnseenTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSample {
    pub x: Vec<f64>,
    pub y: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub samples: Vec<DomainSample>,
    pub attribute: AttributeValue,
    pub labeled: bool,
    pub role: DomainRole,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    /// Inputs as an `n x d` matrix.
    pub fn inputs(&self) -> Mat {
        let d = self.input_dim();
        let mut m = Mat::zeros((self.len(), d));
        for (i, s) in self.samples.iter().enumerate() {
            for (j, &v) in s.x.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    }

    /// Labels, or `None` if any sample lacks one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// Copy with labels removed; this is what the trainer sees of a target domain.
    pub fn without_labels(&self) -> DomainDataset {
        DomainDataset {
            samples: self
                .samples
                .iter()
                .map(|s| DomainSample { x: s.x.clone(), y: None })
                .collect(),
            attribute: self.attribute,
            labeled: false,
            role: self.role,
        }
    }

    pub fn with_role(mut self, role: DomainRole) -> Self {
        self.role = role;
        self
    }
}

/// Which synthetic family a dataset directory holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Gauss2d(ConstellationSpec),
    Glyph { spec: GlyphSpec, resolution: usize },
}

impl Generator {
    pub fn num_classes(&self) -> usize {
        match self {
            Generator::Gauss2d(c) => c.num_classes,
            Generator::Glyph { spec, .. } => spec.num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Generator::Gauss2d(_) => 2,
            Generator::Glyph { resolution, .. } => resolution * resolution,
        }
    }

    pub fn sample(&self, attribute: AttributeValue, n: usize, seed: u64) -> Result<DomainDataset> {
        match self {
            Generator::Gauss2d(c) => sample_domain(c, attribute, n, seed, true),
            Generator::Glyph { spec, resolution } => {
                render_glyph_domain(spec, attribute, n, *resolution, seed)
            }
        }
    }
}

/// Seed for domain `index` derived from a base seed; keeps domains independent.
pub fn domain_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}
