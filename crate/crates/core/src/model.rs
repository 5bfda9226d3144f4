//! Shared encoder, the two adapters (content + auxiliary classifier pairs)
//! and the labeling-function composition used by the discrepancy.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{IndexMap, Mat, Tape, Var};
use crate::error::{invalid_arg, CdaError, Result};

/// Anything with a flat parameter list and a differentiable forward pass.
pub trait Module {
    fn params(&self) -> Vec<&Mat>;
    fn params_mut(&mut self) -> Vec<&mut Mat>;
    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var;

    /// Records every parameter as a tape leaf, in `params()` order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Forward pass on plain values, no gradient bookkeeping kept.
    fn apply(&self, x: &Mat) -> Mat {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &p, xv);
        tape.value(out).clone()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: (usize, usize)) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn(shape, |_| rng.gen_range(-a..a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: Mat,
    /// `1 x out`
    pub bias: Option<Mat>,
}

/// Fully connected network with `tanh` between layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0), "bad MLP widths {widths:?}");
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: xavier(rng, w[0], w[1], (w[0], w[1])),
                bias: Some(Mat::zeros((1, w[1]))),
            })
            .collect();
        Self { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.weight.nrows()).collect();
        w.extend(self.layers.last().map(|l| l.weight.ncols()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Mat> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.weight).chain(l.bias.as_ref()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.weight).chain(l.bias.as_mut()))
            .collect()
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let mut h = x;
        let mut k = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, params[k]);
            k += 1;
            if layer.bias.is_some() {
                h = tape.add_row(h, params[k]);
                k += 1;
            }
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// One convolution of a [`ConvEncoder`]; input and output are channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_size: usize,
    /// `(in_channels * kernel * kernel) x out_channels`
    pub weight: Mat,
    /// `1 x out_channels`
    pub bias: Mat,
}

impl ConvLayer {
    pub fn out_size(&self) -> usize {
        (self.in_size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn im2col(&self, n: usize) -> IndexMap {
        let (c, k, s, p, h) = (self.in_channels, self.kernel, self.stride, self.padding, self.in_size);
        let o = self.out_size();
        let cols = c * k * k;
        let mut src = Vec::with_capacity(n * o * o * cols);
        for b in 0..n {
            for oy in 0..o {
                for ox in 0..o {
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= h as isize {
                                    src.push(IndexMap::NONE);
                                } else {
                                    let flat = b * c * h * h + ch * h * h + iy as usize * h + ix as usize;
                                    src.push(flat as u32);
                                }
                            }
                        }
                    }
                }
            }
        }
        IndexMap { in_shape: (n, c * h * h), out_shape: (n * o * o, cols), src }
    }

    fn to_channel_major(&self, n: usize) -> IndexMap {
        let o2 = self.out_size().pow(2);
        let co = self.out_channels;
        let mut src = Vec::with_capacity(n * co * o2);
        for b in 0..n {
            for ch in 0..co {
                for p in 0..o2 {
                    src.push(((b * o2 + p) * co + ch) as u32);
                }
            }
        }
        IndexMap { in_shape: (n * o2, co), out_shape: (n, co * o2), src }
    }
}

/// Four-layer convolutional encoder for glyph rasters: three stride-2 3x3
/// convolutions, then one convolution covering the remaining spatial extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvEncoder {
    pub layers: Vec<ConvLayer>,
}

impl ConvEncoder {
    pub fn new(resolution: usize, channels: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut size = resolution;
        let mut cin = 1;
        for _ in 0..3 {
            let layer = conv_layer(rng, cin, channels, 3, 2, 1, size);
            size = layer.out_size();
            cin = channels;
            layers.push(layer);
        }
        layers.push(conv_layer(rng, cin, feature_dim, size, 1, 0, size));
        Self { layers }
    }
}

fn conv_layer(
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_size: usize,
) -> ConvLayer {
    let fan_in = cin * kernel * kernel;
    ConvLayer {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
        in_size,
        weight: xavier(rng, fan_in, cout, (fan_in, cout)),
        bias: Mat::zeros((1, cout)),
    }
}

impl Module for ConvEncoder {
    fn params(&self) -> Vec<&Mat> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let n = tape.shape(x).0;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let cols = tape.index(h, Rc::new(layer.im2col(n)));
            let y = tape.matmul(cols, params[2 * i]);
            let y = tape.add_row(y, params[2 * i + 1]);
            h = tape.index(y, Rc::new(layer.to_channel_major(n)));
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderModel {
    Mlp(Mlp),
    Conv(ConvEncoder),
}

impl EncoderModel {
    pub fn input_dim(&self) -> usize {
        match self {
            EncoderModel::Mlp(m) => m.input_dim(),
            EncoderModel::Conv(c) => c.layers[0].in_size.pow(2),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            EncoderModel::Mlp(m) => m.output_dim(),
            EncoderModel::Conv(c) => c.layers.last().unwrap().out_channels,
        }
    }
}

impl Module for EncoderModel {
    fn params(&self) -> Vec<&Mat> {
        match self {
            EncoderModel::Mlp(m) => m.params(),
            EncoderModel::Conv(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            EncoderModel::Mlp(m) => m.params_mut(),
            EncoderModel::Conv(c) => c.params_mut(),
        }
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        match self {
            EncoderModel::Mlp(m) => m.forward(tape, params, x),
            EncoderModel::Conv(c) => c.forward(tape, params, x),
        }
    }
}

/// Content classifier `F_j` with its auxiliary partner `F'_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub index: usize,
    pub content: Mlp,
    pub aux: Mlp,
}

impl AdapterPair {
    pub fn new(index: usize, feature_dim: usize, hidden: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let widths = [feature_dim, hidden, num_classes];
        let content = Mlp::new(&widths, rng);
        let aux = Mlp::new(&widths, rng);
        Self { index, content, aux }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    Source1,
    Source2,
    ProbeTarget,
}

impl FeatureOrigin {
    pub fn source(id: u8) -> Self {
        if id == 1 {
            FeatureOrigin::Source1
        } else {
            FeatureOrigin::Source2
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: Mat,
    pub origin: FeatureOrigin,
    pub detached: bool,
}

impl FeatureBatch {
    pub fn new(features: Mat, origin: FeatureOrigin, detached: bool) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CdaError::NumericalDomain("non-finite feature entry".into()));
        }
        Ok(Self { features, origin, detached })
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }
}

/// Encodes a batch with current parameters. The result carries no gradient
/// linkage; use [`Module::forward`] on a tape for differentiable encodings.
pub fn encode(encoder: &EncoderModel, x: &Mat, origin: FeatureOrigin) -> Result<FeatureBatch> {
    if x.ncols() != encoder.input_dim() {
        return invalid_arg(format!(
            "encoder expects {} input columns, got {}",
            encoder.input_dim(),
            x.ncols()
        ));
    }
    FeatureBatch::new(encoder.apply(x), origin, true)
}

/// Row-wise argmax, ties going to the lowest class index.
pub fn predicted_class(logits: &Mat) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// `J(e)`: the auxiliary softmax probability of the class the content
/// classifier predicts, per row.
pub fn agreement_score(content_logits: &Mat, aux_logits: &Mat) -> Result<Vec<f64>> {
    if content_logits.dim() != aux_logits.dim() {
        return invalid_arg(format!(
            "logit shapes differ: {:?} vs {:?}",
            content_logits.dim(),
            aux_logits.dim()
        ));
    }
    let idx = predicted_class(content_logits);
    let p = softmax_rows(aux_logits);
    Ok(idx.iter().enumerate().map(|(i, &k)| p[[i, k]]).collect())
}

/// Tape version of [`agreement_score`]; `labels` come from the content
/// classifier and carry no gradient. Returns an `n x 1` column.
pub fn agreement_on_tape(tape: &mut Tape, aux_logits: Var, labels: Rc<Vec<usize>>) -> Var {
    let p = tape.softmax_rows(aux_logits);
    tape.gather(p, labels)
}

/// Encoder plus both adapters: everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct CdaModel {
    pub encoder: EncoderModel,
    pub adapters: [AdapterPair; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderArch {
    Mlp { hidden: Vec<usize> },
    Conv { resolution: usize, channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub classifier_hidden: usize,
    pub encoder: EncoderArch,
}

impl ModelConfig {
    /// 2 -> 64 -> 64 -> 16 encoder, 16 -> 64 -> classes heads.
    pub fn gauss2d(num_classes: usize) -> Self {
        Self {
            input_dim: 2,
            num_classes,
            feature_dim: 16,
            classifier_hidden: 64,
            encoder: EncoderArch::Mlp { hidden: vec![64, 64] },
        }
    }

    pub fn glyph(resolution: usize, num_classes: usize) -> Self {
        Self {
            input_dim: resolution * resolution,
            num_classes,
            feature_dim: 16,
            classifier_hidden: 64,
            encoder: EncoderArch::Conv { resolution, channels: 32 },
        }
    }
}

impl CdaModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 || cfg.feature_dim == 0 || cfg.classifier_hidden == 0 {
            return invalid_arg("model needs >= 2 classes and positive widths");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match &cfg.encoder {
            EncoderArch::Mlp { hidden } => {
                let mut widths = vec![cfg.input_dim];
                widths.extend(hidden);
                widths.push(cfg.feature_dim);
                EncoderModel::Mlp(Mlp::new(&widths, &mut rng))
            }
            EncoderArch::Conv { resolution, channels } => {
                if resolution * resolution != cfg.input_dim {
                    return invalid_arg("conv encoder resolution does not match input_dim");
                }
                EncoderModel::Conv(ConvEncoder::new(*resolution, *channels, cfg.feature_dim, &mut rng))
            }
        };
        let a1 = AdapterPair::new(1, cfg.feature_dim, cfg.classifier_hidden, cfg.num_classes, &mut rng);
        let a2 = AdapterPair::new(2, cfg.feature_dim, cfg.classifier_hidden, cfg.num_classes, &mut rng);
        Ok(Self { encoder, adapters: [a1, a2] })
    }

    /// Class probabilities: mean of both content softmaxes, or adapter 1 only.
    pub fn predict_proba(&self, x: &Mat, rule: PredictionRule) -> Mat {
        let e = self.encoder.apply(x);
        let p1 = softmax_rows(&self.adapters[0].content.apply(&e));
        match rule {
            PredictionRule::First => p1,
            PredictionRule::Mean => {
                let p2 = softmax_rows(&self.adapters[1].content.apply(&e));
                (p1 + p2) * 0.5
            }
        }
    }

    pub fn predict(&self, x: &Mat, rule: PredictionRule) -> Vec<usize> {
        predicted_class(&self.predict_proba(x, rule))
    }

    /// Named parameter arrays in checkpoint key order.
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, p) in self.encoder.params().into_iter().enumerate() {
            out.push((format!("encoder/{i}"), p));
        }
        for a in &self.adapters {
            for (i, p) in a.content.params().into_iter().enumerate() {
                out.push((format!("adapter{}/content/{i}", a.index), p));
            }
            for (i, p) in a.aux.params().into_iter().enumerate() {
                out.push((format!("adapter{}/aux/{i}", a.index), p));
            }
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (i, p) in self.encoder.params_mut().into_iter().enumerate() {
            out.push((format!("encoder/{i}"), p));
        }
        for a in &mut self.adapters {
            let idx = a.index;
            for (i, p) in a.content.params_mut().into_iter().enumerate() {
                out.push((format!("adapter{idx}/content/{i}"), p));
            }
            for (i, p) in a.aux.params_mut().into_iter().enumerate() {
                out.push((format!("adapter{idx}/aux/{i}"), p));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionRule {
    #[default]
    Mean,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub encoder_widths: Vec<usize>,
    pub seed: u64,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub metadata: CheckpointMeta,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn capture(model: &CdaModel, cfg: &ModelConfig, seed: u64, step: usize) -> Self {
        let encoder_widths = match &model.encoder {
            EncoderModel::Mlp(m) => m.widths(),
            EncoderModel::Conv(c) => {
                let mut w = vec![1];
                w.extend(c.layers.iter().map(|l| l.out_channels));
                w
            }
        };
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(k, m)| {
                let rec = TensorRecord {
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                };
                (k, rec)
            })
            .collect();
        Self {
            metadata: CheckpointMeta { model: cfg.clone(), encoder_widths, seed, step },
            tensors,
        }
    }

    pub fn restore(&self) -> Result<CdaModel> {
        let mut model = CdaModel::new(&self.metadata.model, self.metadata.seed)?;
        for (key, slot) in model.named_params_mut() {
            let rec = self
                .tensors
                .get(&key)
                .ok_or_else(|| CdaError::InvalidConfiguration(format!("checkpoint lacks {key}")))?;
            if rec.shape != [slot.nrows(), slot.ncols()] {
                return Err(CdaError::InvalidConfiguration(format!("shape mismatch for {key}")));
            }
            *slot = Mat::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone())
                .map_err(|e| CdaError::InvalidConfiguration(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
