//! Alternating Pull / Shrinkage training and the variant matrix.
//!
//! A Pull step moves probe-target features toward both sources (source
//! features are fixed queue snapshots) and updates the encoder only. A
//! Shrinkage step pulls the two sources toward each other and fits both
//! content classifiers on labeled source data.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::discrepancy::{critic_dhat_on_tape, critic_penalty_on_tape, critic_step, ContinuityConfig};
use crate::domain_synth::{DomainDataset, SplitManifest};
use crate::error::{invalid_arg, invalid_config, CdaError, Result};
use crate::model::{softmax_rows, CdaModel, FeatureBatch, FeatureOrigin, Mlp, ModelConfig, Module};
use crate::optim::{Adam, AdamConfig, Optimizer};
use crate::queues::{FeatureQueue, DEFAULT_CAPACITY};

/// Probe domains drawn per Pull step once there are more than this many.
pub const MAX_PROBES_PER_STEP: usize = 4;
/// Rows of probe data used for the classifier-disagreement statistic.
const MONITOR_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "OURS")]
    Ours,
    #[serde(rename = "SO")]
    So,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Ours,
        Variant::So,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::V6,
        Variant::V7,
    ];

    fn uses_queues(self) -> bool {
        !matches!(self, Variant::So | Variant::V6)
    }

    fn uses_gp(self) -> bool {
        !matches!(self, Variant::So | Variant::V7)
    }

    fn uses_shrink_discrepancy(self) -> bool {
        !matches!(self, Variant::So | Variant::V5)
    }

    fn is_joint(self) -> bool {
        matches!(self, Variant::V2 | Variant::V3 | Variant::V4)
    }

    /// Which sources keep fresh, gradient-carrying features in the merged step.
    fn unfixed_sources(self) -> [bool; 2] {
        match self {
            Variant::V2 => [true, true],
            Variant::V3 => [true, false],
            Variant::V4 => [false, true],
            _ => [false, false],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Ours => "OURS",
            Variant::So => "SO",
            Variant::V1 => "V1",
            Variant::V2 => "V2",
            Variant::V3 => "V3",
            Variant::V4 => "V4",
            Variant::V5 => "V5",
            Variant::V6 => "V6",
            Variant::V7 => "V7",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = CdaError;
    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == up)
            .ok_or_else(|| CdaError::InvalidConfiguration(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Pull,
    Shrink,
    /// Merged pull + shrink update used by V2..V4.
    Joint,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::Pull => "pull",
            StepKind::Shrink => "shrink",
            StepKind::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size for auxiliary classifiers and discriminators; defaults to `learning_rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_learning_rate: Option<f64>,
    pub inner_aux_steps: usize,
    pub queue_capacity: usize,
    pub continuity: ContinuityConfig,
    pub alternation_ratio: (usize, usize),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ours,
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-4,
            aux_learning_rate: None,
            inner_aux_steps: 1,
            queue_capacity: DEFAULT_CAPACITY,
            continuity: ContinuityConfig::default(),
            alternation_ratio: (1, 1),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid_config("steps must be >= 1");
        }
        if self.batch_size < 2 {
            return invalid_config("batch_size must be >= 2");
        }
        let lr_ok = |v: f64| v > 0.0 && v.is_finite();
        if !lr_ok(self.learning_rate) || !self.aux_learning_rate.map_or(true, lr_ok) {
            return invalid_config("learning rates must be positive and finite");
        }
        if self.inner_aux_steps == 0 || self.queue_capacity == 0 {
            return invalid_config("inner_aux_steps and queue_capacity must be positive");
        }
        if self.alternation_ratio.0 == 0 || self.alternation_ratio.1 == 0 {
            return invalid_config("alternation ratio entries must be positive");
        }
        if self.batch_size > self.queue_capacity && self.variant.uses_queues() {
            return invalid_config("batch_size exceeds queue capacity");
        }
        self.continuity
            .validate()
            .map_err(|e| CdaError::InvalidConfiguration(e.to_string()))
    }

    /// Kind of the zero-based step `step` under this config's schedule.
    pub fn step_kind(&self, step: usize) -> StepKind {
        if self.variant == Variant::So {
            return StepKind::Shrink;
        }
        if self.variant.is_joint() {
            return StepKind::Joint;
        }
        let (p, s) = self.alternation_ratio;
        if step % (p + s) < p {
            StepKind::Pull
        } else {
            StepKind::Shrink
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_p: f64,
    pub l_gp: f64,
    pub l_s: f64,
    pub l_ce: f64,
    pub step_kind: StepKind,
}

impl LossBundle {
    fn new(step_kind: StepKind) -> Self {
        Self { l_p: 0.0, l_gp: 0.0, l_s: 0.0, l_ce: 0.0, step_kind }
    }

    pub fn is_valid(&self) -> bool {
        [self.l_p, self.l_gp, self.l_s, self.l_ce].iter().all(|v| v.is_finite())
            && self.l_gp >= 0.0
            && self.l_ce >= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: LossBundle,
    pub clf_l2: f64,
    pub queue_occupancy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,step_kind,l_p,l_gp,l_s,l_ce,clf_l2,queue_occupancy")?;
        for r in &self.records {
            let l = &r.losses;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.step, l.step_kind, l.l_p, l.l_gp, l.l_s, l.l_ce, r.clf_l2, r.queue_occupancy
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn records_of(&self, kind: StepKind) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.losses.step_kind == kind)
    }
}

/// Labeled source data.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDomain {
    pub x: Mat,
    pub y: Vec<usize>,
}

/// What the trainer may see: two labeled sources and unlabeled probes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub sources: [LabeledDomain; 2],
    pub probes: Vec<Mat>,
}

impl TrainingData {
    /// Selects sources and probe targets from `domains` by manifest role.
    /// Probe labels are dropped; unseen domains are not touched.
    pub fn from_manifest(manifest: &SplitManifest, domains: &[DomainDataset]) -> Result<Self> {
        manifest.validate()?;
        if domains.len() != manifest.attribute_grid.len() {
            return invalid_config(format!(
                "manifest covers {} domains, dataset has {}",
                manifest.attribute_grid.len(),
                domains.len()
            ));
        }
        let source = |i: usize| -> Result<LabeledDomain> {
            let d = &domains[i];
            let y = d
                .labels()
                .ok_or_else(|| CdaError::ContractViolation(format!("source domain {i} is unlabeled")))?;
            Ok(LabeledDomain { x: d.inputs(), y })
        };
        let sources = [source(manifest.source_indices[0])?, source(manifest.source_indices[1])?];
        let probes = manifest
            .probe_indices
            .iter()
            .map(|&i| domains[i].without_labels().inputs())
            .collect();
        Ok(Self { sources, probes })
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, s) in self.sources.iter().enumerate() {
            if s.x.nrows() == 0 || s.x.nrows() != s.y.len() {
                return invalid_arg(format!("source {} has mismatched or empty data", i + 1));
            }
            if s.y.iter().any(|&c| c >= num_classes) {
                return invalid_arg(format!("source {} has labels outside 0..{num_classes}", i + 1));
            }
        }
        if self.probes.iter().any(|p| p.nrows() == 0) {
            return invalid_arg("empty probe domain");
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under row softmax of `logits`.
pub fn cross_entropy_loss(logits: &Mat, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let ce = cross_entropy_on_tape(&mut tape, l, Rc::new(labels.to_vec()));
    Ok(tape.scalar(ce))
}

fn check_labels(logits: &Mat, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return invalid_arg("one label per logit row required");
    }
    if let Some(bad) = labels.iter().find(|&&c| c >= logits.ncols()) {
        return invalid_arg(format!("label {bad} out of range for {} classes", logits.ncols()));
    }
    Ok(())
}

pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: Rc<Vec<usize>>) -> Var {
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.gather(lsm, labels);
    let m = tape.mean(picked);
    tape.scale(m, -1.0)
}

/// Mean L2 distance between the two content classifiers' probabilities.
pub fn classifier_disagreement(model: &CdaModel, x: &Mat) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    let e = model.encoder.apply(x);
    let p1 = softmax_rows(&model.adapters[0].content.apply(&e));
    let p2 = softmax_rows(&model.adapters[1].content.apply(&e));
    let d = p1 - p2;
    d.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / x.nrows() as f64
}

/// Which critic scores a domain pair.
#[derive(Clone, Copy, Debug)]
enum Critic {
    /// Auxiliary classifier of adapter `j` against its content classifier.
    Adapter(usize),
    /// Binary domain discriminator `k`: 0 = (S1, S2), 1 = (S2, T), 2 = (S1, T).
    Domain(usize),
}

fn take_rows(x: &Mat, idx: &[usize]) -> Mat {
    x.select(ndarray::Axis(0), idx)
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Option<Var> {
    let mut it = vars.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |acc, v| tape.add(acc, v)))
}

pub struct Trainer {
    cfg: TrainConfig,
    pub model: CdaModel,
    enc_opt: Adam,
    content_opt: [Adam; 2],
    aux_opt: [Adam; 2],
    queues: [FeatureQueue; 2],
    discriminators: Vec<Mlp>,
    disc_opt: Vec<Adam>,
    rng: ChaCha8Rng,
    monitor: Mat,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model_cfg: &ModelConfig, data: &TrainingData) -> Result<Self> {
        cfg.validate()?;
        data.validate(model_cfg.num_classes)?;
        let model = CdaModel::new(model_cfg, cfg.seed)?;
        let main = AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() };
        let aux = AdamConfig { lr: cfg.aux_learning_rate.unwrap_or(cfg.learning_rate), ..AdamConfig::default() };
        let adam = |c: AdamConfig| Adam::new(c);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_BA7C4E5);
        let (discriminators, disc_opt) = if cfg.variant == Variant::V1 {
            let mut init = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xD15C));
            let f = model_cfg.feature_dim;
            let h = model_cfg.classifier_hidden;
            let d: Vec<Mlp> = (0..3).map(|_| Mlp::new(&[f, h, 2], &mut init)).collect();
            (d, vec![adam(aux)?, adam(aux)?, adam(aux)?])
        } else {
            (Vec::new(), Vec::new())
        };
        let monitor = monitor_batch(data, &mut rng);
        Ok(Self {
            model,
            enc_opt: adam(main)?,
            content_opt: [adam(main)?, adam(main)?],
            aux_opt: [adam(aux)?, adam(aux)?],
            queues: [FeatureQueue::new(1, cfg.queue_capacity)?, FeatureQueue::new(2, cfg.queue_capacity)?],
            discriminators,
            disc_opt,
            rng,
            monitor,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn queues(&self) -> &[FeatureQueue; 2] {
        &self.queues
    }

    pub fn queue_occupancy(&self) -> f64 {
        if !self.cfg.variant.uses_queues() {
            return 0.0;
        }
        let used: usize = self.queues.iter().map(|q| q.len()).sum();
        used as f64 / (2 * self.cfg.queue_capacity) as f64
    }

    fn sample_rows(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.rng.gen_range(0..n)).collect()
    }

    fn sample_source(&mut self, j: usize, data: &TrainingData) -> (Mat, Vec<usize>) {
        let s = &data.sources[j];
        let idx = self.sample_rows(s.x.nrows());
        (take_rows(&s.x, &idx), idx.iter().map(|&i| s.y[i]).collect())
    }

    fn sample_probes(&mut self, data: &TrainingData) -> Result<Vec<Mat>> {
        let n = data.probes.len();
        if n == 0 {
            return invalid_config("manifest has no probe target domains");
        }
        let chosen: Vec<usize> = if n <= MAX_PROBES_PER_STEP {
            (0..n).collect()
        } else {
            let mut c = sample(&mut self.rng, n, MAX_PROBES_PER_STEP).into_vec();
            c.sort_unstable();
            c
        };
        Ok(chosen
            .into_iter()
            .map(|i| {
                let idx = self.sample_rows(data.probes[i].nrows());
                take_rows(&data.probes[i], &idx)
            })
            .collect())
    }

    fn critic_parts(&self, c: Critic) -> (Option<&Mlp>, &Mlp) {
        match c {
            Critic::Adapter(j) => (Some(&self.model.adapters[j].content), &self.model.adapters[j].aux),
            Critic::Domain(k) => (None, &self.discriminators[k]),
        }
    }

    /// Pull-step critic for source `j`.
    fn pull_critic(&self, j: usize) -> Critic {
        if self.cfg.variant == Variant::V1 {
            Critic::Domain(2 - j)
        } else {
            Critic::Adapter(j)
        }
    }

    /// Shrink-step critics with their (P, Q) orientation as source indices.
    fn shrink_critics(&self) -> Vec<(Critic, usize, usize)> {
        if self.cfg.variant == Variant::V1 {
            vec![(Critic::Domain(0), 0, 1)]
        } else {
            vec![(Critic::Adapter(0), 0, 1), (Critic::Adapter(1), 1, 0)]
        }
    }

    fn inner_steps(&mut self, c: Critic, pairs: &[(&Mat, &Mat)]) -> Result<()> {
        for _ in 0..self.cfg.inner_aux_steps {
            match c {
                Critic::Adapter(j) => {
                    let a = &mut self.model.adapters[j];
                    critic_step(Some(&a.content), &mut a.aux, &mut self.aux_opt[j], pairs)?;
                }
                Critic::Domain(k) => {
                    critic_step(None, &mut self.discriminators[k], &mut self.disc_opt[k], pairs)?;
                }
            }
        }
        Ok(())
    }

    fn bind_critic(&self, tape: &mut Tape, c: Critic) -> Vec<Var> {
        self.critic_parts(c).1.bind(tape)
    }

    fn dhat(&self, tape: &mut Tape, c: Critic, params: &[Var], p: Var, q: Var) -> Var {
        let (content, critic) = self.critic_parts(c);
        critic_dhat_on_tape(tape, content, critic, params, p, q)
    }

    fn penalty(&self, tape: &mut Tape, c: Critic, params: &[Var], target: Var) -> Var {
        let (content, critic) = self.critic_parts(c);
        critic_penalty_on_tape(tape, content, critic, params, target, self.cfg.continuity.target_norm)
    }

    /// Source features a Pull step compares against: queue snapshots once
    /// both queues hold data, otherwise detached fresh encodings of `fallback`.
    fn pull_sources(&self, fallback: [&Mat; 2]) -> Result<[Mat; 2]> {
        let warm = self.cfg.variant.uses_queues() && self.queues.iter().all(|q| !q.is_empty());
        if warm {
            Ok([self.queues[0].snapshot(None)?.features, self.queues[1].snapshot(None)?.features])
        } else {
            Ok([self.model.encoder.apply(fallback[0]), self.model.encoder.apply(fallback[1])])
        }
    }

    /// Encoder-only update on `L_p + L_gp`. Content classifiers stay frozen.
    pub fn pull_step(&mut self, probes: &[Mat], fallback_sources: [&Mat; 2]) -> Result<LossBundle> {
        if probes.is_empty() {
            return invalid_config("pull step needs at least one probe batch");
        }
        let sources = self.pull_sources(fallback_sources)?;
        let target_vals: Vec<Mat> = probes.iter().map(|x| self.model.encoder.apply(x)).collect();
        for j in 0..2 {
            let pairs: Vec<(&Mat, &Mat)> = target_vals.iter().map(|t| (&sources[j], t)).collect();
            self.inner_steps(self.pull_critic(j), &pairs)?;
        }

        let mut tape = Tape::new();
        let enc = self.model.encoder.bind(&mut tape);
        let targets: Vec<Var> = probes
            .iter()
            .map(|x| {
                let xv = tape.leaf(x.clone());
                self.model.encoder.forward(&mut tape, &enc, xv)
            })
            .collect();
        let (mut lp_terms, mut gp_terms) = (Vec::new(), Vec::new());
        for (j, src) in sources.iter().enumerate() {
            let c = self.pull_critic(j);
            let params = self.bind_critic(&mut tape, c);
            let s = tape.leaf(src.clone());
            for &t in &targets {
                lp_terms.push(self.dhat(&mut tape, c, &params, s, t));
                if self.cfg.variant.uses_gp() {
                    gp_terms.push(self.penalty(&mut tape, c, &params, t));
                }
            }
        }
        let mut out = LossBundle::new(StepKind::Pull);
        let lp = sum_vars(&mut tape, &lp_terms).expect("at least one probe");
        out.l_p = tape.scalar(lp);
        let mut loss = lp;
        if let Some(gp) = sum_vars(&mut tape, &gp_terms) {
            out.l_gp = tape.scalar(gp);
            let w = tape.scale(gp, self.cfg.continuity.weight);
            loss = tape.add(loss, w);
        }
        let grads: Vec<Mat> = tape.grad(loss, &enc).into_iter().map(|g| tape.value(g).clone()).collect();
        self.enc_opt.step(self.model.encoder.params_mut(), &grads)?;
        Ok(out)
    }

    fn enqueue(&mut self, feats: [&Mat; 2]) -> Result<()> {
        if !self.cfg.variant.uses_queues() {
            return Ok(());
        }
        for (j, f) in feats.into_iter().enumerate() {
            let batch = FeatureBatch::new(f.clone(), FeatureOrigin::source(j as u8 + 1), true)?;
            self.queues[j].enqueue(&batch)?;
        }
        Ok(())
    }

    /// Joint update of encoder and both content classifiers on `L_s + L_ce`.
    pub fn shrinkage_step(&mut self, s1: (&Mat, &[usize]), s2: (&Mat, &[usize])) -> Result<LossBundle> {
        let xs = [s1.0, s2.0];
        let ys = [s1.1, s2.1];
        let vals = [self.model.encoder.apply(xs[0]), self.model.encoder.apply(xs[1])];
        self.enqueue([&vals[0], &vals[1]])?;
        let with_ls = self.cfg.variant.uses_shrink_discrepancy();
        if with_ls {
            for (c, p, q) in self.shrink_critics() {
                self.inner_steps(c, &[(&vals[p], &vals[q])])?;
            }
        }

        let mut tape = Tape::new();
        let enc = self.model.encoder.bind(&mut tape);
        let heads = [self.model.adapters[0].content.bind(&mut tape), self.model.adapters[1].content.bind(&mut tape)];
        let mut feats = Vec::with_capacity(2);
        let mut ce_terms = Vec::with_capacity(2);
        for j in 0..2 {
            check_labels(&Mat::zeros((ys[j].len(), self.model.adapters[j].content.output_dim())), ys[j])?;
            if xs[j].nrows() != ys[j].len() {
                return invalid_arg("source batch rows and labels differ");
            }
            let xv = tape.leaf(xs[j].clone());
            let e = self.model.encoder.forward(&mut tape, &enc, xv);
            let logits = self.model.adapters[j].content.forward(&mut tape, &heads[j], e);
            ce_terms.push(cross_entropy_on_tape(&mut tape, logits, Rc::new(ys[j].to_vec())));
            feats.push(e);
        }
        let mut out = LossBundle::new(StepKind::Shrink);
        let ce = sum_vars(&mut tape, &ce_terms).unwrap();
        out.l_ce = tape.scalar(ce);
        let mut loss = ce;
        if with_ls {
            let mut ls_terms = Vec::new();
            for (c, p, q) in self.shrink_critics() {
                let params = self.bind_critic(&mut tape, c);
                ls_terms.push(self.dhat(&mut tape, c, &params, feats[p], feats[q]));
            }
            let ls = sum_vars(&mut tape, &ls_terms).unwrap();
            out.l_s = tape.scalar(ls);
            loss = tape.add(loss, ls);
        }
        self.apply_joint_grads(&mut tape, loss, &enc, &heads)?;
        Ok(out)
    }

    fn apply_joint_grads(&mut self, tape: &mut Tape, loss: Var, enc: &[Var], heads: &[Vec<Var>; 2]) -> Result<()> {
        let mut wrt = enc.to_vec();
        wrt.extend(&heads[0]);
        wrt.extend(&heads[1]);
        let grads: Vec<Mat> = tape.grad(loss, &wrt).into_iter().map(|g| tape.value(g).clone()).collect();
        let (g_enc, rest) = grads.split_at(enc.len());
        let (g1, g2) = rest.split_at(heads[0].len());
        self.enc_opt.step(self.model.encoder.params_mut(), g_enc)?;
        self.content_opt[0].step(self.model.adapters[0].content.params_mut(), g1)?;
        self.content_opt[1].step(self.model.adapters[1].content.params_mut(), g2)?;
        Ok(())
    }

    /// Merged Pull + Shrinkage update without the alternation (V2..V4).
    /// Unfixed sources enter the pull term with fresh, gradient-carrying
    /// features; fixed ones use queue snapshots.
    pub fn joint_step(&mut self, s1: (&Mat, &[usize]), s2: (&Mat, &[usize]), probes: &[Mat]) -> Result<LossBundle> {
        if probes.is_empty() {
            return invalid_config("joint step needs at least one probe batch");
        }
        let xs = [s1.0, s2.0];
        let ys = [s1.1, s2.1];
        let unfixed = self.cfg.variant.unfixed_sources();
        let vals = [self.model.encoder.apply(xs[0]), self.model.encoder.apply(xs[1])];
        let fixed_src = self.pull_sources(xs)?;
        let target_vals: Vec<Mat> = probes.iter().map(|x| self.model.encoder.apply(x)).collect();
        for j in 0..2 {
            let src = if unfixed[j] { &vals[j] } else { &fixed_src[j] };
            let mut pairs: Vec<(&Mat, &Mat)> = target_vals.iter().map(|t| (src, t)).collect();
            pairs.push((&vals[j], &vals[1 - j]));
            self.inner_steps(Critic::Adapter(j), &pairs)?;
        }

        let mut tape = Tape::new();
        let enc = self.model.encoder.bind(&mut tape);
        let heads = [self.model.adapters[0].content.bind(&mut tape), self.model.adapters[1].content.bind(&mut tape)];
        let mut feats = Vec::with_capacity(2);
        let mut ce_terms = Vec::with_capacity(2);
        for j in 0..2 {
            check_labels(&Mat::zeros((ys[j].len(), self.model.adapters[j].content.output_dim())), ys[j])?;
            let xv = tape.leaf(xs[j].clone());
            let e = self.model.encoder.forward(&mut tape, &enc, xv);
            let logits = self.model.adapters[j].content.forward(&mut tape, &heads[j], e);
            ce_terms.push(cross_entropy_on_tape(&mut tape, logits, Rc::new(ys[j].to_vec())));
            feats.push(e);
        }
        let targets: Vec<Var> = probes
            .iter()
            .map(|x| {
                let xv = tape.leaf(x.clone());
                self.model.encoder.forward(&mut tape, &enc, xv)
            })
            .collect();
        let (mut lp_terms, mut gp_terms, mut ls_terms) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..2 {
            let c = Critic::Adapter(j);
            let params = self.bind_critic(&mut tape, c);
            let s = if unfixed[j] { feats[j] } else { tape.leaf(fixed_src[j].clone()) };
            for &t in &targets {
                lp_terms.push(self.dhat(&mut tape, c, &params, s, t));
                gp_terms.push(self.penalty(&mut tape, c, &params, t));
            }
            ls_terms.push(self.dhat(&mut tape, c, &params, feats[j], feats[1 - j]));
        }
        let mut out = LossBundle::new(StepKind::Joint);
        let ce = sum_vars(&mut tape, &ce_terms).unwrap();
        let lp = sum_vars(&mut tape, &lp_terms).unwrap();
        let gp = sum_vars(&mut tape, &gp_terms).unwrap();
        let ls = sum_vars(&mut tape, &ls_terms).unwrap();
        out.l_ce = tape.scalar(ce);
        out.l_p = tape.scalar(lp);
        out.l_gp = tape.scalar(gp);
        out.l_s = tape.scalar(ls);
        let gpw = tape.scale(gp, self.cfg.continuity.weight);
        let a = tape.add(ce, lp);
        let b = tape.add(gpw, ls);
        let loss = tape.add(a, b);
        self.apply_joint_grads(&mut tape, loss, &enc, &heads)?;
        self.enqueue([&vals[0], &vals[1]])?;
        Ok(out)
    }

    /// Runs the zero-based step `step` of the schedule on freshly sampled batches.
    pub fn run_step(&mut self, step: usize, data: &TrainingData) -> Result<StepRecord> {
        let kind = self.cfg.step_kind(step);
        let losses = match kind {
            StepKind::Pull => {
                let probes = self.sample_probes(data)?;
                let (x1, _) = self.sample_source(0, data);
                let (x2, _) = self.sample_source(1, data);
                self.pull_step(&probes, [&x1, &x2])?
            }
            StepKind::Shrink => {
                let (x1, y1) = self.sample_source(0, data);
                let (x2, y2) = self.sample_source(1, data);
                self.shrinkage_step((&x1, &y1), (&x2, &y2))?
            }
            StepKind::Joint => {
                let probes = self.sample_probes(data)?;
                let (x1, y1) = self.sample_source(0, data);
                let (x2, y2) = self.sample_source(1, data);
                self.joint_step((&x1, &y1), (&x2, &y2), &probes)?
            }
        };
        if !losses.is_valid() || !self.model.all_finite() {
            return Err(CdaError::NumericalDomain(format!("training diverged at step {step}")));
        }
        Ok(StepRecord {
            step,
            losses,
            clf_l2: classifier_disagreement(&self.model, &self.monitor),
            queue_occupancy: self.queue_occupancy(),
        })
    }
}

/// Fixed probe rows for the disagreement statistic (source rows if there are no probes).
fn monitor_batch(data: &TrainingData, rng: &mut ChaCha8Rng) -> Mat {
    let pool: Vec<&Mat> = if data.probes.is_empty() {
        data.sources.iter().map(|s| &s.x).collect()
    } else {
        data.probes.iter().collect()
    };
    let per = (MONITOR_ROWS / pool.len()).max(1);
    let parts: Vec<Mat> = pool
        .into_iter()
        .map(|m| {
            let k = per.min(m.nrows());
            let idx = sample(rng, m.nrows(), k).into_vec();
            take_rows(m, &idx)
        })
        .collect();
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Trains from scratch; deterministic for a fixed config and data.
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &TrainingData) -> Result<(CdaModel, TrainLog)> {
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), model_cfg, data)?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        log.records.push(trainer.run_step(step, data)?);
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((trainer.model, log))
}
