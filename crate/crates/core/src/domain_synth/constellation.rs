use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttributeValue, DomainDataset, DomainRole, DomainSample};
use crate::error::{invalid_arg, Result};

// Class means sit at increasing radii around a common seeded direction, each
// offset by a seeded angular jitter. Radius is the only rotation-invariant
// cue, so a model that leans on position fits the sources and then degrades
// as the attribute moves away from them.

/// Geometry of a generated constellation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstellationParams {
    pub inner_radius: f64,
    pub ring_spacing: f64,
    /// Radial standard deviation range.
    pub radial_std: (f64, f64),
    /// Tangential standard deviation range.
    pub tangential_std: (f64, f64),
    /// Half-width in radians of the uniform offset of each class direction
    /// from the shared one; `0` puts every mean on one ray, `pi` makes the
    /// directions independent.
    #[serde(default)]
    pub angle_jitter: f64,
}

impl Default for ConstellationParams {
    fn default() -> Self {
        Self {
            inner_radius: 1.0,
            ring_spacing: 0.6,
            radial_std: (0.08, 0.14),
            tangential_std: (0.06, 0.2),
            angle_jitter: 1.0,
        }
    }
}

/// Class-conditional Gaussians in the plane; the unrotated (attribute 0) domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstellationSpec {
    pub num_classes: usize,
    pub class_means: Vec<[f64; 2]>,
    pub class_covariances: Vec<[[f64; 2]; 2]>,
    pub base_seed: u64,
}

impl ConstellationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return invalid_arg("constellation needs at least 2 classes");
        }
        if self.class_means.len() != self.num_classes
            || self.class_covariances.len() != self.num_classes
        {
            return invalid_arg("one mean and one covariance per class required");
        }
        for c in &self.class_covariances {
            if c[0][1] != c[1][0] {
                return invalid_arg("covariance must be symmetric");
            }
            let (l1, l2) = eigenvalues(c);
            if !(l1 > 0.0 && l2 > 0.0) {
                return invalid_arg("covariance must be positive definite");
            }
        }
        Ok(())
    }

    /// Largest per-axis standard deviation over all classes.
    pub fn max_std(&self) -> f64 {
        self.class_covariances
            .iter()
            .map(|c| eigenvalues(c).0.sqrt())
            .fold(0.0, f64::max)
    }

    /// Smallest distance between two class means.
    pub fn min_mean_distance(&self) -> f64 {
        let m = &self.class_means;
        (0..m.len())
            .flat_map(|i| (0..i).map(move |j| dist(m[i], m[j])))
            .fold(f64::INFINITY, f64::min)
    }

    fn cholesky(&self, class: usize) -> [[f64; 2]; 2] {
        let c = &self.class_covariances[class];
        let l00 = c[0][0].sqrt();
        let l10 = c[1][0] / l00;
        let l11 = (c[1][1] - l10 * l10).sqrt();
        [[l00, 0.0], [l10, l11]]
    }
}

/// Eigenvalues of a symmetric 2x2 matrix, largest first.
fn eigenvalues(c: &[[f64; 2]; 2]) -> (f64, f64) {
    let tr = c[0][0] + c[1][1];
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 + disc, tr / 2.0 - disc)
}

pub fn make_constellation(num_classes: usize, seed: u64) -> Result<ConstellationSpec> {
    make_constellation_with(num_classes, seed, &ConstellationParams::default())
}

pub fn make_constellation_with(num_classes: usize, seed: u64, params: &ConstellationParams) -> Result<ConstellationSpec> {
    if num_classes < 2 {
        return invalid_arg(format!("num_classes must be >= 2, got {num_classes}"));
    }
    let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && hi > lo;
    if !(params.inner_radius > 0.0 && params.ring_spacing > 0.0)
        || !ok_range(params.radial_std)
        || !ok_range(params.tangential_std)
        || !(0.0..=std::f64::consts::PI).contains(&params.angle_jitter)
    {
        return invalid_arg("constellation radii and spreads must be positive ranges");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_means = Vec::with_capacity(num_classes);
    let mut class_covariances = Vec::with_capacity(num_classes);
    let base: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for class in 0..num_classes {
        let r = params.inner_radius + params.ring_spacing * class as f64;
        let phi = if params.angle_jitter > 0.0 {
            base + rng.gen_range(-params.angle_jitter..=params.angle_jitter)
        } else {
            base
        };
        let sr: f64 = rng.gen_range(params.radial_std.0..params.radial_std.1);
        let st: f64 = rng.gen_range(params.tangential_std.0..params.tangential_std.1);
        let (s, c) = phi.sin_cos();
        // R diag(sr^2, st^2) R^T with the first axis pointing radially
        let a = c * c * sr * sr + s * s * st * st;
        let b = c * s * (sr * sr - st * st);
        let d = s * s * sr * sr + c * c * st * st;
        class_means.push([r * c, r * s]);
        class_covariances.push([[a, b], [b, d]]);
    }
    let spec = ConstellationSpec { num_classes, class_means, class_covariances, base_seed: seed };
    let gap = spec.min_mean_distance();
    if gap < 2.0 * spec.max_std() {
        return invalid_arg(format!(
            "class means {gap:.3} apart, below twice the largest std {:.3}",
            spec.max_std()
        ));
    }
    Ok(spec)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Counterclockwise rotation about the origin by `angle` degrees.
pub fn rotate_point(p: [f64; 2], angle: AttributeValue) -> [f64; 2] {
    let (s, c) = angle.get().to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Draws `n` points with uniform class labels, then rotates by `attribute`.
pub fn sample_domain(
    spec: &ConstellationSpec,
    attribute: AttributeValue,
    n: usize,
    seed: u64,
    labeled: bool,
) -> Result<DomainDataset> {
    if n < 1 {
        return invalid_arg("sample_domain needs n >= 1");
    }
    spec.validate()?;
    let chol: Vec<_> = (0..spec.num_classes).map(|c| spec.cholesky(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let y = rng.gen_range(0..spec.num_classes);
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let l = &chol[y];
            let m = spec.class_means[y];
            let p = [m[0] + l[0][0] * z0, m[1] + l[1][0] * z0 + l[1][1] * z1];
            let r = rotate_point(p, attribute);
            DomainSample { x: r.to_vec(), y: labeled.then_some(y) }
        })
        .collect();
    Ok(DomainDataset { samples, attribute, labeled, role: DomainRole::Source })
}
