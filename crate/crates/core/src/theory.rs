//! Numerical checks of the divergence theory on explicit histograms.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discrepancy::CLAMP_EPS;
use crate::error::{invalid_arg, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return invalid_arg("distribution needs at least one bin");
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return invalid_arg("probabilities must be finite and non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid_arg(format!("probabilities sum to {total}"));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) || w.iter().any(|v| *v < 0.0) {
            return invalid_arg("weights must be non-negative with positive sum");
        }
        let mut probs: Vec<f64> = w.iter().map(|v| v / total).collect();
        // put rounding residue on the largest bin so the sum check holds
        let drift = 1.0 - probs.iter().sum::<f64>();
        let imax = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
        probs[imax] += drift;
        Self::new(probs)
    }

    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Self::from_weights(&w).expect("random weights are positive")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn same_support(p: &DiscreteDist, q: &DiscreteDist) -> Result<()> {
    if p.len() != q.len() {
        return invalid_arg(format!("support sizes differ: {} vs {}", p.len(), q.len()));
    }
    Ok(())
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

pub fn kl_divergence(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    same_support(p, q)?;
    Ok(p.probs.iter().zip(&q.probs).map(|(&a, &b)| xlogy(a, a) - xlogy(a, b)).sum())
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    same_support(p, q)?;
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect();
    let half = |d: &[f64]| -> f64 { d.iter().zip(&m).map(|(&a, &mm)| xlogy(a, a) - xlogy(a, mm)).sum() };
    Ok((0.5 * half(&p.probs) + 0.5 * half(&q.probs)).clamp(0.0, LN_2))
}

/// `J*_b = P_b / (P_b + Q_b)`; bins where both vanish are reported as `None`.
pub fn optimal_aux(p: &DiscreteDist, q: &DiscreteDist) -> Result<Vec<Option<f64>>> {
    same_support(p, q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| (a + b > 0.0).then(|| a / (a + b)))
        .collect())
}

/// Per-bin objective `-P log J - Q log(1 - J)` with `0 log 0 := 0`.
fn bin_objective(p: f64, q: f64, j: f64) -> f64 {
    -xlogy(p, j) - xlogy(q, 1.0 - j)
}

/// Total objective at the analytic optimum.
pub fn objective_at_optimum(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    let j = optimal_aux(p, q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .zip(j)
        .map(|((&a, &b), j)| j.map_or(0.0, |j| bin_objective(a, b, j)))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    pub j_grid: Vec<f64>,
    pub extremal_value: f64,
}

/// Exhaustive per-bin search over `resolution` points spanning `[eps, 1 - eps]`.
pub fn bruteforce_sup(p: &DiscreteDist, q: &DiscreteDist, resolution: usize) -> Result<BruteForce> {
    same_support(p, q)?;
    if resolution < 100 {
        return invalid_arg("grid resolution must be at least 100");
    }
    let lo = CLAMP_EPS;
    let step = (1.0 - 2.0 * CLAMP_EPS) / (resolution - 1) as f64;
    let mut j_grid = Vec::with_capacity(p.len());
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let (mut best_j, mut best) = (lo, f64::INFINITY);
        for k in 0..resolution {
            let j = lo + step * k as f64;
            let v = bin_objective(a, b, j);
            if v < best {
                best = v;
                best_j = j;
            }
        }
        j_grid.push(best_j);
        total += best;
    }
    Ok(BruteForce { j_grid, extremal_value: total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub passed: bool,
}

/// Checks `2 log 2 - objective(J*) = 2 JS(P || Q)`, each side summed independently.
pub fn verify_js_identity(p: &DiscreteDist, q: &DiscreteDist, tol: f64) -> Result<IdentityReport> {
    if !(tol > 0.0) {
        return invalid_arg("tolerance must be positive");
    }
    let lhs = 2.0 * LN_2 - objective_at_optimum(p, q)?;
    let rhs = 2.0 * js_divergence(p, q)?;
    let residual = (lhs - rhs).abs();
    Ok(IdentityReport { lhs, rhs, residual, passed: residual <= tol })
}

/// `JS(s1||t) + JS(s2||t) + 2 JS(s1||s2)`: the combined optimum of the two
/// training stages for one target.
pub fn combined_divergence(s1: &DiscreteDist, s2: &DiscreteDist, t: &DiscreteDist) -> Result<f64> {
    Ok(js_divergence(s1, t)? + js_divergence(s2, t)? + 2.0 * js_divergence(s1, s2)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

fn identity_check(residuals: Vec<f64>, tol: f64) -> CheckResult {
    let mut c = check("js_identity_at_optimum", residuals, tol);
    c.passed &= tol > 0.0;
    c
}

fn check(name: &str, residuals: impl IntoIterator<Item = f64>, tolerance: f64) -> CheckResult {
    let (mut cases, mut max_residual) = (0, 0.0f64);
    for r in residuals {
        cases += 1;
        max_residual = max_residual.max(if r.is_nan() { f64::INFINITY } else { r });
    }
    CheckResult { name: name.into(), cases, max_residual, tolerance, passed: max_residual <= tolerance }
}

/// Settings for [`run_theory_checks`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub resolution: usize,
    /// Tolerance on the identity residual.
    pub tol: f64,
    /// Number of pairs given to the grid search; `None` searches all of them.
    pub bruteforce_trials: Option<usize>,
}

impl Default for TheoryCheckOptions {
    fn default() -> Self {
        Self { seed: 0, trials: 1000, resolution: 10_000, tol: 1e-9, bruteforce_trials: None }
    }
}

/// Runs every identity check on `trials` random histogram pairs (support 2..=16).
/// A non-positive `tol` cannot be met and fails the identity check.
pub fn run_theory_checks(opts: &TheoryCheckOptions) -> Result<TheoryReport> {
    if opts.trials == 0 {
        return invalid_arg("trials must be >= 1");
    }
    if opts.resolution < 100 {
        return invalid_arg("grid resolution must be at least 100");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draws = Vec::with_capacity(opts.trials);
    for _ in 0..opts.trials {
        let n = rng.gen_range(2..=16);
        draws.push((DiscreteDist::random(n, &mut rng), DiscreteDist::random(n, &mut rng), DiscreteDist::random(n, &mut rng)));
    }

    let mut identity = Vec::new();
    let mut symmetry = Vec::new();
    let mut range = Vec::new();
    for (p, q, _) in &draws {
        let lhs = 2.0 * LN_2 - objective_at_optimum(p, q)?;
        identity.push((lhs - 2.0 * js_divergence(p, q)?).abs());
        symmetry.push((js_divergence(p, q)? - js_divergence(q, p)?).abs());
        let js = js_divergence(p, q)?;
        range.push(if (0.0..=LN_2).contains(&js) { 0.0 } else { f64::INFINITY });
    }

    let resolution = opts.resolution;
    let mut extremum = Vec::new();
    for (p, q, _) in draws.iter().take(opts.bruteforce_trials.unwrap_or(opts.trials)) {
        let bf = bruteforce_sup(p, q, resolution)?;
        let opt = optimal_aux(p, q)?;
        let gap = bf
            .j_grid
            .iter()
            .zip(opt)
            .filter_map(|(g, o)| o.map(|o| (g - o).abs()))
            .fold(0.0, f64::max);
        extremum.push(gap * resolution as f64 / 2.0);
    }

    let mut global = Vec::new();
    for (p, q, t) in &draws {
        // equal triple sits at zero; any distinct triple is strictly positive
        global.push(combined_divergence(p, p, p)?);
        let positive = combined_divergence(p, q, t)? > 0.0;
        global.push(if positive { 0.0 } else { f64::INFINITY });
    }

    let checks = vec![
        identity_check(identity, opts.tol),
        check("js_symmetry", symmetry, 1e-12),
        check("js_range", range, 0.0),
        // residual in units of grid spacing / 2: passes when within 2/resolution
        check("bruteforce_matches_optimal_aux", extremum, 1.0),
        check("global_optimum_only_at_equality", global, 1e-9),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(TheoryReport { seed: opts.seed, checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn d(v: &[f64]) -> DiscreteDist {
        DiscreteDist::new(v.to_vec()).unwrap()
    }

    // Independent JS: entropy form H(M) - (H(P) + H(Q)) / 2.
    fn js_entropy_form(p: &[f64], q: &[f64]) -> f64 {
        let h = |v: &[f64]| -> f64 { v.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum() };
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
        h(&m) - 0.5 * (h(p) + h(q))
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&d(&[0.3, 0.7]), &d(&[0.3, 0.7])).unwrap(), 0.0);
        assert!((js_divergence(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap() - LN_2).abs() < 1e-15);
        let js = js_divergence(&d(&[0.5, 0.5]), &d(&[0.25, 0.75])).unwrap();
        assert!((js - js_entropy_form(&[0.5, 0.5], &[0.25, 0.75])).abs() < 1e-15);
        assert!((js - 0.0338).abs() < 5e-5, "{js}");
        assert!(js_divergence(&d(&[1.0]), &d(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn dist_validation() {
        assert!(DiscreteDist::new(vec![0.5, 0.4]).is_err());
        assert!(DiscreteDist::new(vec![-0.5, 1.5]).is_err());
        assert!(DiscreteDist::new(vec![]).is_err());
    }

    #[test]
    fn optimal_aux_examples() {
        let j = optimal_aux(&d(&[0.5, 0.5]), &d(&[0.25, 0.75])).unwrap();
        assert!((j[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((j[1].unwrap() - 0.4).abs() < 1e-15);
        let j = optimal_aux(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap();
        assert_eq!(j, vec![Some(1.0), Some(0.0)]);
        let j = optimal_aux(&d(&[0.2, 0.8]), &d(&[0.2, 0.8])).unwrap();
        assert!(j.iter().all(|v| *v == Some(0.5)));
        let j = optimal_aux(&d(&[0.0, 1.0]), &d(&[0.0, 1.0])).unwrap();
        assert_eq!(j[0], None);
    }

    #[test]
    fn bruteforce_examples() {
        let u = d(&[0.5, 0.5]);
        let bf = bruteforce_sup(&u, &u, 1001).unwrap();
        let spacing = 1.0 / 1000.0;
        assert!(bf.j_grid.iter().all(|j| (j - 0.5).abs() <= spacing));
        assert!((bf.extremal_value - 2.0 * LN_2).abs() < 1e-5);

        let bf = bruteforce_sup(&d(&[1.0, 0.0]), &d(&[0.0, 1.0]), 10_000).unwrap();
        assert!(bf.extremal_value < 1e-6);
        assert!((bf.extremal_value - 2.0 * -(1.0 - CLAMP_EPS).ln()).abs() < 1e-12);
        assert!(bruteforce_sup(&u, &u, 99).is_err());
    }

    #[test]
    fn identity_examples() {
        let u = d(&[0.5, 0.5]);
        let r = verify_js_identity(&u, &u, 1e-12).unwrap();
        assert!(r.passed && r.residual == 0.0 && r.rhs == 0.0);
        let r = verify_js_identity(&u, &d(&[0.25, 0.75]), 1e-12).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn random_identity_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=16);
            let (p, q) = (DiscreteDist::random(n, &mut rng), DiscreteDist::random(n, &mut rng));
            let r = verify_js_identity(&p, &q, 1e-9).unwrap();
            assert!(r.passed, "{r:?}");
            assert!((r.rhs / 2.0 - js_entropy_form(p.probs(), q.probs())).abs() < 1e-12);
        }
    }

    #[test]
    fn bruteforce_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(2..=8);
            let (p, q) = (DiscreteDist::random(n, &mut rng), DiscreteDist::random(n, &mut rng));
            let bf = bruteforce_sup(&p, &q, 10_000).unwrap();
            let opt = optimal_aux(&p, &q).unwrap();
            for (g, o) in bf.j_grid.iter().zip(opt) {
                assert!((g - o.unwrap()).abs() <= 2.0 / 10_000.0);
            }
            assert!((bf.extremal_value - objective_at_optimum(&p, &q).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn global_optimum_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.gen_range(2..=10);
            let p = DiscreteDist::random(n, &mut rng);
            assert!(combined_divergence(&p, &p, &p).unwrap() <= 1e-9);
            // move a little mass between two bins of one member of the triple
            let mut w = p.probs().to_vec();
            let delta = 0.5 * w[0].min(w[1]);
            w[0] -= delta;
            w[1] += delta;
            let moved = DiscreteDist::from_weights(&w).unwrap();
            for triple in [(&moved, &p, &p), (&p, &moved, &p), (&p, &p, &moved)] {
                assert!(combined_divergence(triple.0, triple.1, triple.2).unwrap() > 1e-9);
            }
        }
    }

    #[test]
    fn report_passes() {
        let opts = TheoryCheckOptions { trials: 200, bruteforce_trials: Some(20), ..Default::default() };
        let r = run_theory_checks(&opts).unwrap();
        assert!(r.passed, "{r:#?}");
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn zero_tolerance_fails() {
        let opts = TheoryCheckOptions { trials: 5, tol: 0.0, bruteforce_trials: Some(1), ..Default::default() };
        let r = run_theory_checks(&opts).unwrap();
        assert!(!r.passed);
        assert!(run_theory_checks(&TheoryCheckOptions { trials: 0, ..opts }).is_err());
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded(
            a in proptest::collection::vec(0.0f64..1.0, 2..12),
            b in proptest::collection::vec(0.0f64..1.0, 2..12),
        ) {
            let n = a.len().min(b.len());
            prop_assume!(a[..n].iter().sum::<f64>() > 1e-6 && b[..n].iter().sum::<f64>() > 1e-6);
            let p = DiscreteDist::from_weights(&a[..n]).unwrap();
            let q = DiscreteDist::from_weights(&b[..n]).unwrap();
            let pq = js_divergence(&p, &q).unwrap();
            prop_assert!((pq - js_divergence(&q, &p).unwrap()).abs() <= 1e-12);
            prop_assert!((0.0..=LN_2).contains(&pq));
        }
    }
}
