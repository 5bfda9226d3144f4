use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{invalid_arg, CdaError, Result};
use crate::model::{FeatureBatch, FeatureOrigin};

pub const DEFAULT_CAPACITY: usize = 512;

/// FIFO of detached source features, oldest row first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureQueue {
    capacity: usize,
    source_id: u8,
    dim: Option<usize>,
    entries: VecDeque<Vec<f64>>,
    // step at which each entry was pushed, for age statistics
    stamps: VecDeque<u64>,
    clock: u64,
}

impl FeatureQueue {
    pub fn new(source_id: u8, capacity: usize) -> Result<Self> {
        if !(source_id == 1 || source_id == 2) {
            return invalid_arg(format!("source_id must be 1 or 2, got {source_id}"));
        }
        if capacity == 0 {
            return invalid_arg("queue capacity must be positive");
        }
        Ok(Self {
            capacity,
            source_id,
            dim: None,
            entries: VecDeque::with_capacity(capacity),
            stamps: VecDeque::with_capacity(capacity),
            clock: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn source_id(&self) -> u8 {
        self.source_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends the batch rows as copies and evicts the oldest rows beyond capacity.
    pub fn enqueue(&mut self, batch: &FeatureBatch) -> Result<()> {
        if batch.origin != FeatureOrigin::source(self.source_id) {
            return Err(CdaError::ContractViolation(format!(
                "queue {} cannot store {:?} features",
                self.source_id, batch.origin
            )));
        }
        if batch.rows() > self.capacity {
            return invalid_arg(format!("batch of {} rows exceeds capacity {}", batch.rows(), self.capacity));
        }
        let d = batch.features.ncols();
        if *self.dim.get_or_insert(d) != d {
            return invalid_arg("feature width changed between enqueues");
        }
        self.clock += 1;
        for row in batch.features.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
                self.stamps.pop_front();
            }
            self.entries.push_back(row.to_vec());
            self.stamps.push_back(self.clock);
        }
        Ok(())
    }

    /// Up to `max_rows` newest entries (oldest first among them).
    pub fn snapshot(&self, max_rows: Option<usize>) -> Result<FeatureBatch> {
        if self.entries.is_empty() {
            return Err(CdaError::EmptyQueue(self.source_id));
        }
        if max_rows == Some(0) {
            return invalid_arg("max_rows must be positive");
        }
        let n = max_rows.map_or(self.len(), |m| m.min(self.len()));
        let skip = self.len() - n;
        let d = self.dim.unwrap_or(0);
        let mut m = Mat::zeros((n, d));
        for (i, row) in self.entries.iter().skip(skip).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        FeatureBatch::new(m, FeatureOrigin::source(self.source_id), true)
    }

    pub fn occupancy(&self) -> f64 {
        self.len() as f64 / self.capacity as f64
    }

    /// Mean number of enqueue calls since each stored row was pushed.
    pub fn mean_age(&self) -> f64 {
        if self.stamps.is_empty() {
            return 0.0;
        }
        self.stamps.iter().map(|&s| (self.clock - s) as f64).sum::<f64>() / self.stamps.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{CdaModel, Module, ModelConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(ids: &[f64], origin: FeatureOrigin) -> FeatureBatch {
        let m = Mat::from_shape_vec((ids.len(), 1), ids.to_vec()).unwrap();
        FeatureBatch::new(m, origin, true).unwrap()
    }

    fn contents(q: &FeatureQueue) -> Vec<f64> {
        q.entries().map(|r| r[0]).collect()
    }

    #[test]
    fn fifo_eviction() {
        let mut q = FeatureQueue::new(1, 3).unwrap();
        q.enqueue(&ids(&[1.0, 2.0, 3.0], FeatureOrigin::Source1)).unwrap();
        q.enqueue(&ids(&[4.0], FeatureOrigin::Source1)).unwrap();
        assert_eq!(contents(&q), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn append_preserves_order() {
        let mut q = FeatureQueue::new(2, 8).unwrap();
        q.enqueue(&ids(&[7.0, 5.0], FeatureOrigin::Source2)).unwrap();
        assert_eq!(contents(&q), vec![7.0, 5.0]);
    }

    #[test]
    fn origin_gate() {
        let mut q = FeatureQueue::new(1, 8).unwrap();
        assert!(matches!(
            q.enqueue(&ids(&[1.0], FeatureOrigin::ProbeTarget)),
            Err(CdaError::ContractViolation(_))
        ));
        assert!(matches!(
            q.enqueue(&ids(&[1.0], FeatureOrigin::Source2)),
            Err(CdaError::ContractViolation(_))
        ));
        assert!(matches!(
            FeatureQueue::new(1, 2).unwrap().enqueue(&ids(&[1.0, 2.0, 3.0], FeatureOrigin::Source1)),
            Err(CdaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn snapshot_examples() {
        let mut q = FeatureQueue::new(1, 10).unwrap();
        assert!(matches!(q.snapshot(None), Err(CdaError::EmptyQueue(1))));
        q.enqueue(&ids(&[1.0, 2.0, 3.0, 4.0, 5.0], FeatureOrigin::Source1)).unwrap();
        let all = q.snapshot(None).unwrap();
        assert_eq!(all.rows(), 5);
        assert!(all.detached);
        assert_eq!(all.origin, FeatureOrigin::Source1);
        let newest = q.snapshot(Some(2)).unwrap();
        assert_eq!(newest.features, array![[4.0], [5.0]]);
    }

    #[test]
    fn age_statistics() {
        let mut q = FeatureQueue::new(1, 4).unwrap();
        q.enqueue(&ids(&[1.0, 2.0], FeatureOrigin::Source1)).unwrap();
        q.enqueue(&ids(&[3.0, 4.0], FeatureOrigin::Source1)).unwrap();
        assert_eq!(q.mean_age(), 0.5);
        assert_eq!(q.occupancy(), 1.0);
    }

    #[test]
    fn matches_reference_model_over_random_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cap = 37;
        let mut q = FeatureQueue::new(2, cap).unwrap();
        let mut reference: Vec<[f64; 2]> = Vec::new();
        let mut next = 0.0;
        for _ in 0..10_000 {
            if rng.gen_bool(0.6) {
                let n = rng.gen_range(1..=cap);
                let rows: Vec<f64> = (0..n)
                    .flat_map(|_| {
                        next += 1.0;
                        [next, -next]
                    })
                    .collect();
                let b = FeatureBatch::new(Mat::from_shape_vec((n, 2), rows).unwrap(), FeatureOrigin::Source2, true)
                    .unwrap();
                q.enqueue(&b).unwrap();
                for r in b.features.rows() {
                    reference.push([r[0], r[1]]);
                }
                let keep = reference.len().saturating_sub(cap);
                reference.drain(..keep);
            } else {
                let max = rng.gen_bool(0.5).then(|| rng.gen_range(1..=cap + 5));
                let before = q.clone();
                match q.snapshot(max) {
                    Ok(s) => {
                        let n = max.map_or(reference.len(), |m| m.min(reference.len()));
                        let expect = &reference[reference.len() - n..];
                        let got: Vec<[f64; 2]> = s.features.rows().into_iter().map(|r| [r[0], r[1]]).collect();
                        assert_eq!(got, expect);
                    }
                    Err(CdaError::EmptyQueue(2)) => assert!(reference.is_empty()),
                    Err(e) => panic!("{e}"),
                }
                assert_eq!(q, before);
            }
            let stored: Vec<[f64; 2]> = q.entries().map(|r| [r[0], r[1]]).collect();
            assert_eq!(stored, reference);
        }
    }

    #[test]
    fn snapshot_carries_no_encoder_gradient() {
        let model = CdaModel::new(&ModelConfig::gauss2d(3), 0).unwrap();
        let mut tape = Tape::new();
        let params = model.encoder.bind(&mut tape);
        let x = tape.leaf(array![[0.5, -0.3], [1.2, 0.8]]);
        let e = model.encoder.forward(&mut tape, &params, x);
        let mut q = FeatureQueue::new(1, 16).unwrap();
        let batch = FeatureBatch::new(tape.value(e).clone(), FeatureOrigin::Source1, true).unwrap();
        q.enqueue(&batch).unwrap();
        let snap = tape.leaf(q.snapshot(None).unwrap().features);
        let sq = tape.mul(snap, snap);
        let loss = tape.sum(sq);
        for g in tape.grad(loss, &params) {
            assert!(tape.value(g).iter().all(|&v| v == 0.0));
        }
    }
}
