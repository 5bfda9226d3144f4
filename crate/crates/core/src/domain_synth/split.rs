//! Source / probe / unseen assignment over an attribute grid.
//!
//! `P1` puts the two sources at the grid extremes and samples probes from the
//! interior. `P2`..`P4` put the sources inside the grid, cutting it into an
//! outer-left, a middle and an outer-right segment; the segment kind picks
//! which of those segments may contribute probes:
//!
//! | kind | segments                 |
//! |------|--------------------------|
//! | S1   | left, middle, right      |
//! | S2   | left, middle             |
//! | S3   | middle                   |
//! | S4   | left                     |
//!
//! Probes are drawn per segment, once per seed, before the segment kind is
//! applied. For a fixed seed the S2..S4 probe sets are therefore restrictions
//! of the S1 probe set.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DomainRole;
use crate::error::{invalid_arg, invalid_config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionKind {
    P1,
    P2,
    P3,
    P4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    S1,
    S2,
    S3,
    S4,
}

impl std::str::FromStr for PositionKind {
    type Err = crate::error::CdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Self::P1),
            "P2" => Ok(Self::P2),
            "P3" => Ok(Self::P3),
            "P4" => Ok(Self::P4),
            _ => invalid_config(format!("unknown position kind {s:?}")),
        }
    }
}

impl std::str::FromStr for SegmentKind {
    type Err = crate::error::CdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Self::S1),
            "S2" => Ok(Self::S2),
            "S3" => Ok(Self::S3),
            "S4" => Ok(Self::S4),
            _ => invalid_config(format!("unknown segment kind {s:?}")),
        }
    }
}

impl SegmentKind {
    /// Which of (left, middle, right) may hold probes.
    fn permits(self) -> [bool; 3] {
        match self {
            SegmentKind::S1 => [true, true, true],
            SegmentKind::S2 => [true, true, false],
            SegmentKind::S3 => [false, true, false],
            SegmentKind::S4 => [true, false, false],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRequest {
    pub position: PositionKind,
    pub segment: Option<SegmentKind>,
    /// Explicit source grid indices; `None` uses [`default_sources`].
    pub sources: Option<(usize, usize)>,
    pub probe_fraction: f64,
    pub seed: u64,
}

impl SplitRequest {
    pub fn new(position: PositionKind, segment: Option<SegmentKind>, seed: u64) -> Self {
        Self { position, segment, sources: None, probe_fraction: 0.5, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub attribute_grid: Vec<f64>,
    pub source_indices: [usize; 2],
    pub probe_indices: Vec<usize>,
    pub unseen_indices: Vec<usize>,
    pub position_kind: PositionKind,
    pub segment_kind: Option<SegmentKind>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn role(&self, index: usize) -> DomainRole {
        if self.source_indices.contains(&index) {
            DomainRole::Source
        } else if self.probe_indices.contains(&index) {
            DomainRole::ProbeTarget
        } else {
            DomainRole::UnseenTarget
        }
    }

    pub fn roles(&self) -> Vec<DomainRole> {
        (0..self.attribute_grid.len()).map(|i| self.role(i)).collect()
    }

    /// Attribute interval from which probes may come, bounded by grid points
    /// (sources included). `(0, 180)` for S1 on a `[0, 180]` grid.
    pub fn probe_region(&self) -> (f64, f64) {
        let g = &self.attribute_grid;
        let last = g.len() - 1;
        let [l, r] = self.source_indices;
        match (self.position_kind, self.segment_kind) {
            (PositionKind::P1, _) | (_, Some(SegmentKind::S1)) | (_, None) => (g[0], g[last]),
            (_, Some(SegmentKind::S2)) => (g[0], g[r]),
            (_, Some(SegmentKind::S3)) => (g[l], g[r]),
            (_, Some(SegmentKind::S4)) => (g[0], g[l]),
        }
    }

    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.attribute_grid.len();
        let mut seen = vec![0u8; n];
        for &i in self
            .source_indices
            .iter()
            .chain(&self.probe_indices)
            .chain(&self.unseen_indices)
        {
            if i >= n {
                return invalid_config(format!("index {i} outside grid of {n}"));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) || self.source_indices[0] == self.source_indices[1] {
            return invalid_config("source, probe and unseen sets must partition the grid");
        }
        Ok(())
    }
}

/// Source placement used when a request does not name one.
///
/// 9- and 10-point grids follow the reference split tables for the 9-elevation
/// and 10-age datasets; other sizes use the same quarter-inset rule as the
/// 9-point table.
pub fn default_sources(position: PositionKind, n: usize) -> (usize, usize) {
    match (position, n) {
        (PositionKind::P1, _) => (0, n - 1),
        (PositionKind::P2, 10) => (1, 7),
        (PositionKind::P3, 10) => (2, 6),
        (PositionKind::P4, 10) => (3, 6),
        (p, _) => {
            let q = n / 4;
            let right = n - 1 - q;
            let left = match p {
                PositionKind::P2 => q,
                PositionKind::P3 => q + 1,
                _ => q + 2,
            };
            (left.min(right - 1), right)
        }
    }
}

/// `round(x)` with halves going up.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn probe_count(len: usize, fraction: f64) -> usize {
    if len == 0 {
        return 0;
    }
    round_half_up(fraction * len as f64).clamp(1, len)
}

pub fn build_split(grid: &[f64], req: &SplitRequest) -> Result<SplitManifest> {
    let n = grid.len();
    if n < 5 {
        return invalid_arg(format!("split needs at least 5 grid attributes, got {n}"));
    }
    if !(req.probe_fraction > 0.0 && req.probe_fraction <= 1.0) {
        return invalid_arg(format!("probe_fraction must be in (0, 1], got {}", req.probe_fraction));
    }
    match (req.position, req.segment) {
        (PositionKind::P1, Some(_)) => return invalid_config("P1 takes no segment kind"),
        (PositionKind::P1, None) => {}
        (_, None) => return invalid_config("P2..P4 need a segment kind"),
        _ => {}
    }
    let (l, r) = req.sources.unwrap_or_else(|| default_sources(req.position, n));
    if l >= r || r >= n {
        return invalid_config(format!("bad source indices ({l}, {r}) for grid of {n}"));
    }
    if req.position == PositionKind::P1 && (l, r) != (0, n - 1) {
        return invalid_config("P1 places sources at the grid extremes");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut draw = |segment: std::ops::Range<usize>| -> Vec<usize> {
        let len = segment.len();
        let k = probe_count(len, req.probe_fraction);
        let start = segment.start;
        sample(&mut rng, len, k).into_iter().map(|i| start + i).collect()
    };

    let probes: BTreeSet<usize> = match req.segment {
        None => draw(l + 1..r).into_iter().collect(),
        Some(kind) => {
            let segments = [0..l, l + 1..r, r + 1..n];
            let picks: Vec<Vec<usize>> = segments.iter().cloned().map(&mut draw).collect();
            let mut set = BTreeSet::new();
            for ((seg, pick), allowed) in segments.iter().zip(&picks).zip(kind.permits()) {
                if allowed {
                    if seg.is_empty() {
                        return invalid_config(format!(
                            "segment {seg:?} is empty but required by {kind:?}"
                        ));
                    }
                    set.extend(pick);
                }
            }
            set
        }
    };

    let unseen = (0..n)
        .filter(|i| *i != l && *i != r && !probes.contains(i))
        .collect();
    let manifest = SplitManifest {
        attribute_grid: grid.to_vec(),
        source_indices: [l, r],
        probe_indices: probes.into_iter().collect(),
        unseen_indices: unseen,
        position_kind: req.position,
        segment_kind: req.segment,
        seed: req.seed,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid9() -> Vec<f64> {
        (0..9).map(|i| 22.5 * i as f64).collect()
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(3.5), 4);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(probe_count(7, 0.5), 4);
        assert_eq!(probe_count(2, 0.2), 1);
    }

    #[test]
    fn p1_sources_at_extremes() {
        let m = build_split(&grid9(), &SplitRequest::new(PositionKind::P1, None, 3)).unwrap();
        assert_eq!(m.source_indices, [0, 8]);
        assert_eq!(m.probe_indices.len(), 4);
        assert!(m.probe_indices.iter().all(|&i| (1..8).contains(&i)));
    }

    #[test]
    fn p2_s3_probes_only_from_middle() {
        for seed in 0..20 {
            let mut req = SplitRequest::new(PositionKind::P2, Some(SegmentKind::S3), seed);
            req.sources = Some((2, 6));
            let m = build_split(&grid9(), &req).unwrap();
            assert!(m.probe_indices.iter().all(|i| [3, 4, 5].contains(i)));
        }
    }

    #[test]
    fn segment_kinds_are_nested_for_fixed_seed() {
        let s = |kind| {
            let mut req = SplitRequest::new(PositionKind::P3, Some(kind), 11);
            req.probe_fraction = 0.6;
            build_split(&grid9(), &req).unwrap().probe_indices
        };
        let s1: BTreeSet<_> = s(SegmentKind::S1).into_iter().collect();
        for kind in [SegmentKind::S2, SegmentKind::S3, SegmentKind::S4] {
            assert!(s(kind).iter().all(|i| s1.contains(i)));
        }
    }

    #[test]
    fn configuration_errors() {
        let g = grid9();
        assert!(build_split(&g, &SplitRequest::new(PositionKind::P1, Some(SegmentKind::S1), 0)).is_err());
        assert!(build_split(&g, &SplitRequest::new(PositionKind::P2, None, 0)).is_err());
        let mut req = SplitRequest::new(PositionKind::P2, Some(SegmentKind::S4), 0);
        req.sources = Some((0, 6));
        assert!(matches!(
            build_split(&g, &req),
            Err(crate::error::CdaError::InvalidConfiguration(_))
        ));
        assert!(build_split(&g[..4], &SplitRequest::new(PositionKind::P1, None, 0)).is_err());
        let mut req = SplitRequest::new(PositionKind::P1, None, 0);
        req.probe_fraction = 0.0;
        assert!(build_split(&g, &req).is_err());
    }

    #[test]
    fn probe_region_matches_rotation_table_ranges() {
        let mut req = SplitRequest::new(PositionKind::P2, Some(SegmentKind::S2), 0);
        req.sources = Some((1, 7));
        assert_eq!(build_split(&grid9(), &req).unwrap().probe_region(), (0.0, 157.5));
    }

    proptest! {
        #[test]
        fn manifests_partition_the_grid(
            n in 5usize..16,
            pos in 0usize..4,
            seg in 0usize..4,
            frac in 0.05f64..1.0,
            seed in any::<u64>(),
        ) {
            let grid: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let position = [PositionKind::P1, PositionKind::P2, PositionKind::P3, PositionKind::P4][pos];
            let segment = (position != PositionKind::P1)
                .then(|| [SegmentKind::S1, SegmentKind::S2, SegmentKind::S3, SegmentKind::S4][seg]);
            let req = SplitRequest { position, segment, sources: None, probe_fraction: frac, seed };
            if let Ok(m) = build_split(&grid, &req) {
                prop_assert!(m.validate().is_ok());
                prop_assert_eq!(
                    m.probe_indices.len() + m.unseen_indices.len() + 2,
                    n
                );
            }
        }
    }
}
