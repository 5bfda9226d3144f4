//! A trained auxiliary classifier on one-hot binned features should reach the
//! analytic optimum, so the learned discrepancy approaches 2 JS between the
//! empirical bin histograms.

use cdalab::autodiff::Mat;
use cdalab::discrepancy::{aux_adversarial_step, estimate};
use cdalab::model::{AdapterPair, FeatureBatch, FeatureOrigin};
use cdalab::optim::{Adam, AdamConfig};
use cdalab::theory::{js_divergence, DiscreteDist};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BINS: usize = 6;

fn one_hot(weights: &[f64], n: usize, rng: &mut ChaCha8Rng) -> (Mat, Vec<f64>) {
    let dist = WeightedIndex::new(weights).unwrap();
    let mut m = Mat::zeros((n, BINS));
    let mut counts = vec![0.0; BINS];
    for r in 0..n {
        let b = dist.sample(rng);
        m[[r, b]] = 1.0;
        counts[b] += 1.0;
    }
    (m, counts)
}

fn learned_vs_analytic(p: &[f64], q: &[f64], seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xp, cp) = one_hot(p, 2000, &mut rng);
    let (xq, cq) = one_hot(q, 2000, &mut rng);
    let fp = FeatureBatch::new(xp, FeatureOrigin::Source1, true).unwrap();
    let fq = FeatureBatch::new(xq, FeatureOrigin::ProbeTarget, true).unwrap();
    let mut adapter = AdapterPair::new(1, BINS, 16, 3, &mut rng);
    let mut opt = Adam::new(AdamConfig { lr: 2e-2, ..Default::default() }).unwrap();
    for _ in 0..1500 {
        aux_adversarial_step(&mut adapter, &mut opt, &fp, &fq).unwrap();
    }
    let learned = estimate(&adapter, &fp, &fq).unwrap().js_normalized();
    let analytic = 2.0 * js_divergence(&DiscreteDist::from_weights(&cp).unwrap(), &DiscreteDist::from_weights(&cq).unwrap()).unwrap();
    (learned, analytic)
}

#[test]
fn learned_discrepancy_tracks_twice_js() {
    let cases: [([f64; BINS], [f64; BINS]); 3] = [
        ([1.0, 1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
        ([4.0, 3.0, 1.0, 1.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0, 3.0, 4.0]),
        ([6.0, 1.0, 1.0, 1.0, 1.0, 0.2], [1.0, 1.0, 2.0, 2.0, 1.0, 3.0]),
    ];
    for (i, (p, q)) in cases.iter().enumerate() {
        let (learned, analytic) = learned_vs_analytic(p, q, i as u64);
        assert!((learned - analytic).abs() <= 0.1, "case {i}: learned {learned} vs 2JS {analytic}");
    }
}
