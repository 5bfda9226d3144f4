//! Classifier-pair discrepancy and the continuity gradient penalty.
//!
//! The auxiliary classifier minimizes the binary cross-entropy returned by
//! [`discrepancy_objective`]; at its optimum `J = P / (P + Q)` and the
//! reported value `2 log 2 - objective` equals `2 JS(P || Q)`.

use std::f64::consts::LN_2;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{invalid_arg, CdaError, Result};
use crate::model::{agreement_on_tape, agreement_score, predicted_class, AdapterPair, FeatureBatch, Mlp, Module};
use crate::optim::Optimizer;

/// Scores are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before taking logs.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    CrossEntropy,
    JsNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyEstimate {
    pub value: f64,
    pub convention: Convention,
    pub j: usize,
}

impl DiscrepancyEstimate {
    pub fn js_normalized(&self) -> f64 {
        match self.convention {
            Convention::JsNormalized => self.value,
            Convention::CrossEntropy => 2.0 * LN_2 - self.value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityConfig {
    pub target_norm: f64,
    pub weight: f64,
}

impl Default for ContinuityConfig {
    fn default() -> Self {
        Self { target_norm: 1.0, weight: 1.0 }
    }
}

impl ContinuityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_norm > 0.0 && self.target_norm.is_finite()) {
            return invalid_arg("target_norm must be positive");
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return invalid_arg("penalty weight must be non-negative");
        }
        Ok(())
    }
}

fn clamp_score(v: f64) -> f64 {
    v.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// `-mean(log J_p) - mean(log(1 - J_q))`.
pub fn discrepancy_objective(j_p: &[f64], j_q: &[f64]) -> Result<f64> {
    if j_p.is_empty() || j_q.is_empty() {
        return invalid_arg("discrepancy needs scores from both domains");
    }
    if let Some(bad) = j_p.iter().chain(j_q).find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(CdaError::NumericalDomain(format!("score {bad} outside (0, 1)")));
    }
    let lp = j_p.iter().map(|&v| clamp_score(v).ln()).sum::<f64>() / j_p.len() as f64;
    let lq = j_q.iter().map(|&v| (1.0 - clamp_score(v)).ln()).sum::<f64>() / j_q.len() as f64;
    Ok(-lp - lq)
}

/// Tape form of [`discrepancy_objective`] on `n x 1` score columns.
pub fn objective_on_tape(tape: &mut Tape, j_p: Var, j_q: Var) -> Var {
    let jp = tape.clamp(j_p, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let lp = tape.log(jp);
    let mp = tape.mean(lp);
    let jq = tape.clamp(j_q, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let neg = tape.scale(jq, -1.0);
    let cq = tape.add_scalar(neg, 1.0);
    let lq = tape.log(cq);
    let mq = tape.mean(lq);
    let s = tape.add(mp, mq);
    tape.scale(s, -1.0)
}

/// Labels a critic scores against: the content classifier's prediction for
/// a classifier pair, class 0 for a plain binary domain discriminator.
pub fn critic_labels(content: Option<&Mlp>, feats: &Mat) -> Rc<Vec<usize>> {
    match content {
        Some(c) => Rc::new(predicted_class(&c.apply(feats))),
        None => Rc::new(vec![0; feats.nrows()]),
    }
}

/// Scores of a critic on tape-resident features; labels are read off the
/// current values and carry no gradient.
pub fn critic_scores_on_tape(tape: &mut Tape, content: Option<&Mlp>, critic: &Mlp, params: &[Var], feats: Var) -> Var {
    let labels = critic_labels(content, tape.value(feats));
    let logits = critic.forward(tape, params, feats);
    agreement_on_tape(tape, logits, labels)
}

/// `2 log 2 - objective`, differentiable in both feature inputs.
pub fn critic_dhat_on_tape(
    tape: &mut Tape,
    content: Option<&Mlp>,
    critic: &Mlp,
    params: &[Var],
    feats_p: Var,
    feats_q: Var,
) -> Var {
    let jp = critic_scores_on_tape(tape, content, critic, params, feats_p);
    let jq = critic_scores_on_tape(tape, content, critic, params, feats_q);
    let obj = objective_on_tape(tape, jp, jq);
    let neg = tape.scale(obj, -1.0);
    tape.add_scalar(neg, 2.0 * LN_2)
}

pub fn scores_on_tape(tape: &mut Tape, adapter: &AdapterPair, aux_params: &[Var], feats: Var) -> Var {
    critic_scores_on_tape(tape, Some(&adapter.content), &adapter.aux, aux_params, feats)
}

pub fn dhat_on_tape(tape: &mut Tape, adapter: &AdapterPair, aux_params: &[Var], feats_p: Var, feats_q: Var) -> Var {
    critic_dhat_on_tape(tape, Some(&adapter.content), &adapter.aux, aux_params, feats_p, feats_q)
}

fn check_batches(p: &FeatureBatch, q: &FeatureBatch) -> Result<()> {
    check_mats(&p.features, &q.features)
}

fn check_mats(p: &Mat, q: &Mat) -> Result<()> {
    if p.nrows() == 0 || q.nrows() == 0 {
        return invalid_arg("discrepancy batches must be nonempty");
    }
    if p.ncols() != q.ncols() {
        return invalid_arg("feature widths differ");
    }
    Ok(())
}

/// Current estimate without updating anything.
pub fn estimate(adapter: &AdapterPair, feats_p: &FeatureBatch, feats_q: &FeatureBatch) -> Result<DiscrepancyEstimate> {
    check_batches(feats_p, feats_q)?;
    let score = |f: &Mat| {
        let e = agreement_score(&adapter.content.apply(f), &adapter.aux.apply(f))?;
        Ok::<_, CdaError>(e.into_iter().map(clamp_score).collect::<Vec<_>>())
    };
    let obj = discrepancy_objective(&score(&feats_p.features)?, &score(&feats_q.features)?)?;
    Ok(DiscrepancyEstimate { value: 2.0 * LN_2 - obj, convention: Convention::JsNormalized, j: adapter.index })
}

/// One optimizer step on `critic` minimizing the summed objective over
/// `(P, Q)` feature pairs. Returns the summed objective before the update.
pub fn critic_step(content: Option<&Mlp>, critic: &mut Mlp, opt: &mut dyn Optimizer, pairs: &[(&Mat, &Mat)]) -> Result<f64> {
    if pairs.is_empty() {
        return invalid_arg("critic step needs at least one domain pair");
    }
    let mut tape = Tape::new();
    let params = critic.bind(&mut tape);
    let mut total = None;
    for (p, q) in pairs {
        check_mats(p, q)?;
        let fp = tape.leaf((*p).clone());
        let fq = tape.leaf((*q).clone());
        let jp = critic_scores_on_tape(&mut tape, content, critic, &params, fp);
        let jq = critic_scores_on_tape(&mut tape, content, critic, &params, fq);
        let obj = objective_on_tape(&mut tape, jp, jq);
        total = Some(match total {
            None => obj,
            Some(t) => tape.add(t, obj),
        });
    }
    let total = total.unwrap();
    let before = tape.scalar(total);
    let grads: Vec<Mat> = tape.grad(total, &params).into_iter().map(|g| tape.value(g).clone()).collect();
    opt.step(critic.params_mut(), &grads)?;
    Ok(before)
}

/// One optimizer step on the auxiliary classifier toward `J = P / (P + Q)`.
/// Returns the objective measured before the update. Only `adapter.aux`
/// changes; features enter as constants.
pub fn aux_adversarial_step(
    adapter: &mut AdapterPair,
    opt: &mut dyn Optimizer,
    feats_p: &FeatureBatch,
    feats_q: &FeatureBatch,
) -> Result<f64> {
    check_batches(feats_p, feats_q)?;
    let AdapterPair { content, aux, .. } = adapter;
    critic_step(Some(content), aux, opt, &[(&feats_p.features, &feats_q.features)])
}

/// `mean_k (||g_k|| - target_norm)^2` for per-row gradients `g`.
pub fn penalty_from_gradients(g: &Mat, target_norm: f64) -> f64 {
    let n = g.nrows().max(1) as f64;
    g.rows()
        .into_iter()
        .map(|r| (r.dot(&r).sqrt() - target_norm).powi(2))
        .sum::<f64>()
        / n
}

/// Tape form of the continuity penalty. `g_k` is the gradient of the
/// target-side term of `D_hat` with respect to target row `k` (auxiliary
/// parameters held at their current values). The result stays
/// differentiable, so encoder gradients pass through it.
pub fn gradient_penalty_on_tape(
    tape: &mut Tape,
    adapter: &AdapterPair,
    aux_params: &[Var],
    target: Var,
    target_norm: f64,
) -> Var {
    critic_penalty_on_tape(tape, Some(&adapter.content), &adapter.aux, aux_params, target, target_norm)
}

pub fn critic_penalty_on_tape(
    tape: &mut Tape,
    content: Option<&Mlp>,
    critic: &Mlp,
    params: &[Var],
    target: Var,
    target_norm: f64,
) -> Var {
    let j = critic_scores_on_tape(tape, content, critic, params, target);
    let jc = tape.clamp(j, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let neg = tape.scale(jc, -1.0);
    let comp = tape.add_scalar(neg, 1.0);
    let logs = tape.log(comp);
    // Summing rather than averaging keeps each row's gradient at per-sample scale.
    let total = tape.sum(logs);
    let g = tape.grad(total, &[target])[0];
    let sq = tape.mul(g, g);
    let n2 = tape.sum_cols(sq);
    let norm = tape.sqrt(n2);
    let dev = tape.add_scalar(norm, -target_norm);
    let dev2 = tape.mul(dev, dev);
    tape.mean(dev2)
}

/// Value-level penalty. Target features must be marked as attached, i.e.
/// produced where gradients with respect to them are meaningful.
pub fn gradient_penalty(
    adapter: &AdapterPair,
    source_feats: &FeatureBatch,
    target_feats: &FeatureBatch,
    config: &ContinuityConfig,
) -> Result<f64> {
    config.validate()?;
    check_batches(source_feats, target_feats)?;
    if target_feats.detached {
        return Err(CdaError::ContractViolation("gradient penalty needs attached target features".into()));
    }
    let mut tape = Tape::new();
    let params = adapter.aux.bind(&mut tape);
    let t = tape.leaf(target_feats.features.clone());
    let gp = gradient_penalty_on_tape(&mut tape, adapter, &params, t, config.target_norm);
    Ok(tape.scalar(gp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CdaModel, EncoderModel, FeatureOrigin, ModelConfig};
    use crate::optim::{Adam, AdamConfig, Sgd};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn adapter(seed: u64, dim: usize, classes: usize) -> AdapterPair {
        AdapterPair::new(1, dim, 16, classes, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn batch(rows: usize, cols: usize, seed: u64, shift: f64) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0) + shift);
        FeatureBatch::new(m, FeatureOrigin::Source1, false).unwrap()
    }

    #[test]
    fn objective_examples() {
        let o = discrepancy_objective(&[0.5], &[0.5]).unwrap();
        assert!((o - 2.0 * LN_2).abs() < 1e-12);
        let o = discrepancy_objective(&[0.75], &[0.25]).unwrap();
        assert!((o - 0.575364).abs() < 1e-6);
        let e = 1e-9;
        assert!(discrepancy_objective(&[1.0 - e], &[e]).unwrap() < 1e-6);
    }

    #[test]
    fn objective_rejects_out_of_range() {
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                discrepancy_objective(&[bad], &[0.5]),
                Err(CdaError::NumericalDomain(_))
            ));
        }
        assert!(discrepancy_objective(&[], &[0.5]).is_err());
    }

    #[test]
    fn identical_batches_converge_to_half() {
        let mut a = adapter(3, 4, 3);
        let f = batch(40, 4, 1, 0.0);
        let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() }).unwrap();
        for _ in 0..600 {
            aux_adversarial_step(&mut a, &mut opt, &f, &f).unwrap();
        }
        let obj = 2.0 * LN_2 - estimate(&a, &f, &f).unwrap().value;
        assert!((obj - 2.0 * LN_2).abs() < 1e-2, "objective {obj}");
    }

    #[test]
    fn step_leaves_content_untouched() {
        let mut a = adapter(5, 4, 3);
        let before = a.content.clone();
        let aux_before = a.aux.clone();
        let mut opt = Sgd { lr: 0.5 };
        aux_adversarial_step(&mut a, &mut opt, &batch(8, 4, 1, 0.0), &batch(8, 4, 2, 1.0)).unwrap();
        assert_eq!(a.content, before);
        assert_ne!(a.aux, aux_before);
    }

    #[test]
    fn separable_objective_decreases() {
        let mut a = adapter(7, 4, 2);
        let p = batch(32, 4, 1, 2.0);
        let q = batch(32, 4, 2, -2.0);
        let mut opt = Adam::new(AdamConfig { lr: 5e-3, ..Default::default() }).unwrap();
        let trace: Vec<f64> = (0..300)
            .map(|_| aux_adversarial_step(&mut a, &mut opt, &p, &q).unwrap())
            .collect();
        let windows: Vec<f64> = trace.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
        assert!(*trace.last().unwrap() < 0.2 * trace[0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut a = adapter(1, 4, 2);
        let empty = FeatureBatch::new(Mat::zeros((0, 4)), FeatureOrigin::Source1, true).unwrap();
        let mut opt = Sgd { lr: 0.1 };
        assert!(matches!(
            aux_adversarial_step(&mut a, &mut opt, &empty, &batch(3, 4, 0, 0.0)),
            Err(CdaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn penalty_examples() {
        assert!(penalty_from_gradients(&array![[0.6, 0.8]], 1.0).abs() < 1e-15);
        assert!((penalty_from_gradients(&array![[3.0, 4.0]], 1.0) - 16.0).abs() < 1e-12);
        assert_eq!(penalty_from_gradients(&array![[0.0, 0.0]], 1.0), 1.0);
    }

    #[test]
    fn constant_discrepancy_gives_unit_penalty() {
        // aux output independent of the input: zero per-row gradient
        let mut a = adapter(2, 3, 2);
        for l in &mut a.aux.layers {
            l.weight.fill(0.0);
        }
        let src = batch(4, 3, 0, 0.0);
        let tgt = batch(5, 3, 1, 0.0);
        let gp = gradient_penalty(&a, &src, &tgt, &ContinuityConfig::default()).unwrap();
        assert!((gp - 1.0).abs() < 1e-15);
    }

    #[test]
    fn detached_targets_violate_contract() {
        let a = adapter(2, 3, 2);
        let mut tgt = batch(5, 3, 1, 0.0);
        tgt.detached = true;
        assert!(matches!(
            gradient_penalty(&a, &batch(2, 3, 0, 0.0), &tgt, &ContinuityConfig::default()),
            Err(CdaError::ContractViolation(_))
        ));
    }

    // Per-row gradient of log(1 - J(e)) by central differences on plain values.
    fn fd_row_grads(a: &AdapterPair, feats: &Mat) -> Mat {
        let h = 1e-6;
        let f = |row: &Mat| {
            let j = agreement_score(&a.content.apply(row), &a.aux.apply(row)).unwrap()[0];
            (1.0 - clamp_score(j)).ln()
        };
        let mut g = Mat::zeros(feats.dim());
        for i in 0..feats.nrows() {
            let row = feats.slice(ndarray::s![i..i + 1, ..]).to_owned();
            for k in 0..feats.ncols() {
                let mut p = row.clone();
                p[[0, k]] += h;
                let mut m = row.clone();
                m[[0, k]] -= h;
                g[[i, k]] = (f(&p) - f(&m)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn penalty_matches_finite_difference_oracle() {
        let a = adapter(11, 3, 3);
        let tgt = batch(6, 3, 4, 0.3);
        for norm in [0.5, 1.0, 2.0] {
            let cfg = ContinuityConfig { target_norm: norm, weight: 1.0 };
            let gp = gradient_penalty(&a, &batch(2, 3, 0, 0.0), &tgt, &cfg).unwrap();
            let oracle = penalty_from_gradients(&fd_row_grads(&a, &tgt.features), norm);
            assert!((gp - oracle).abs() < 1e-7, "{gp} vs {oracle}");
        }
    }

    #[test]
    fn penalty_vanishes_at_matching_norm() {
        // 2-class linear aux: the single row's gradient norm is computable
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = adapter(1, 2, 2);
        a.aux = Mlp::new(&[2, 2], &mut rng);
        let tgt = FeatureBatch::new(array![[0.3, -0.2]], FeatureOrigin::Source1, false).unwrap();
        let g = fd_row_grads(&a, &tgt.features);
        let n = g.row(0).dot(&g.row(0)).sqrt();
        let cfg = ContinuityConfig { target_norm: n, weight: 1.0 };
        assert!(gradient_penalty(&a, &tgt, &tgt, &cfg).unwrap() < 1e-12);
        let off = ContinuityConfig { target_norm: n + 0.5, weight: 1.0 };
        assert!(gradient_penalty(&a, &tgt, &tgt, &off).unwrap() > 0.2);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            input_dim: 2,
            num_classes: 3,
            feature_dim: 4,
            classifier_hidden: 6,
            encoder: crate::model::EncoderArch::Mlp { hidden: vec![8] },
        };
        let model = CdaModel::new(&cfg, 21).unwrap();
        let a = &model.adapters[0];
        let x = array![[0.4, -1.1], [1.3, 0.2], [-0.7, 0.9], [0.05, 0.6]];
        let penalty = |enc: &EncoderModel| {
            let mut tape = Tape::new();
            let ep = enc.bind(&mut tape);
            let ap = a.aux.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let e = enc.forward(&mut tape, &ep, xv);
            let gp = gradient_penalty_on_tape(&mut tape, a, &ap, e, 1.0);
            (tape, ep, gp)
        };
        let (mut tape, ep, gp) = penalty(&model.encoder);
        let grads = tape.grad(gp, &ep);
        let h = 1e-4;
        for (pi, gv) in grads.iter().enumerate() {
            let analytic = tape.value(*gv).clone();
            for idx in [(0usize, 0usize), (0, 3), (1, 2)] {
                if idx.0 >= analytic.nrows() || idx.1 >= analytic.ncols() {
                    continue;
                }
                let mut plus = model.encoder.clone();
                plus.params_mut()[pi][idx] += h;
                let mut minus = model.encoder.clone();
                minus.params_mut()[pi][idx] -= h;
                let (tp, _, vp) = penalty(&plus);
                let (tm, _, vm) = penalty(&minus);
                let num = (tp.scalar(vp) - tm.scalar(vm)) / (2.0 * h);
                let rel = (num - analytic[idx]).abs() / num.abs().max(analytic[idx].abs()).max(1e-8);
                assert!(rel <= 1e-4, "param {pi} {idx:?}: fd {num} vs {}", analytic[idx]);
            }
        }
    }

    proptest! {
        #[test]
        fn penalty_is_nonnegative(seed in 0u64..500, norm in 0.1f64..3.0) {
            let a = adapter(seed, 3, 3);
            let tgt = batch(4, 3, seed + 1, 0.0);
            let cfg = ContinuityConfig { target_norm: norm, weight: 1.0 };
            prop_assert!(gradient_penalty(&a, &tgt, &tgt, &cfg).unwrap() >= 0.0);
        }

        #[test]
        fn js_estimate_is_bounded(seed in 0u64..500, shift in -2.0f64..2.0) {
            let a = adapter(seed, 3, 2);
            let est = estimate(&a, &batch(6, 3, seed, 0.0), &batch(6, 3, seed + 7, shift)).unwrap();
            prop_assert!(est.value <= 2.0 * LN_2 + 1e-12);
        }
    }
}
