//! Per-domain accuracy, subgroup breakdowns, MMD shift profiles and
//! rank-correlation summaries.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::domain_synth::{DomainDataset, DomainRole, SplitManifest};
use crate::error::{invalid_arg, CdaError, Result};
use crate::model::{CdaModel, EncoderModel, Module, PredictionRule};

/// Bandwidth multipliers applied to the median pairwise distance.
pub const BANDWIDTH_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub index: usize,
    pub attribute: f64,
    pub role: DomainRole,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMeans {
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub probe: Option<f64>,
    pub unseen: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_domain_accuracy: Vec<DomainAccuracy>,
    pub subgroup_means: SubgroupMeans,
    /// Mean over probe and unseen domains.
    pub overall_target_mean: Option<f64>,
    pub mmd_matrix: Option<Vec<Vec<f64>>>,
    pub degradation_correlation: Option<f64>,
    /// Spearman correlation of off-diagonal MMD entries with attribute gaps.
    #[serde(default)]
    pub mmd_distance_correlation: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if self.per_domain_accuracy.iter().any(|d| !(0.0..=1.0).contains(&d.accuracy)) {
            return invalid_arg("accuracy outside [0, 1]");
        }
        if let Some(m) = &self.mmd_matrix {
            for (i, row) in m.iter().enumerate() {
                if row.len() != m.len() || row[i].abs() > 1e-9 {
                    return invalid_arg("MMD matrix must be square with zero diagonal");
                }
                for (j, v) in row.iter().enumerate() {
                    if (v - m[j][i]).abs() > 1e-12 {
                        return invalid_arg("MMD matrix must be symmetric");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fraction of `pred` equal to `labels`.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(CdaError::UndefinedAccuracy("empty dataset".into()));
    }
    if pred.len() != labels.len() {
        return invalid_arg("prediction and label counts differ");
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn dataset_accuracy(model: &CdaModel, data: &DomainDataset, rule: PredictionRule) -> Result<f64> {
    if data.is_empty() {
        return Err(CdaError::UndefinedAccuracy("empty dataset".into()));
    }
    let labels = data
        .labels()
        .ok_or_else(|| CdaError::ContractViolation("evaluation data must carry labels".into()))?;
    accuracy(&model.predict(&data.inputs(), rule), &labels)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Accuracy on every domain plus subgroup means by manifest role. Without a
/// manifest every domain counts as an unseen target.
pub fn per_domain_accuracy(
    model: &CdaModel,
    datasets: &[DomainDataset],
    manifest: Option<&SplitManifest>,
    rule: PredictionRule,
) -> Result<MetricsReport> {
    if let Some(m) = manifest {
        if m.attribute_grid.len() != datasets.len() {
            return invalid_arg("manifest and dataset list differ in length");
        }
    }
    let mut per = Vec::with_capacity(datasets.len());
    for (i, d) in datasets.iter().enumerate() {
        let role = manifest.map_or(DomainRole::UnseenTarget, |m| m.role(i));
        per.push(DomainAccuracy { index: i, attribute: d.attribute.get(), role, accuracy: dataset_accuracy(model, d, rule)? });
    }
    let pick = |f: &dyn Fn(&DomainAccuracy) -> bool| -> Vec<f64> { per.iter().filter(|d| f(d)).map(|d| d.accuracy).collect() };
    let src = manifest.map(|m| m.source_indices);
    let subgroup_means = SubgroupMeans {
        s1: src.and_then(|s| mean(&pick(&|d| d.index == s[0]))),
        s2: src.and_then(|s| mean(&pick(&|d| d.index == s[1]))),
        probe: mean(&pick(&|d| d.role == DomainRole::ProbeTarget)),
        unseen: mean(&pick(&|d| d.role == DomainRole::UnseenTarget)),
    };
    let overall_target_mean = mean(&pick(&|d| d.role != DomainRole::Source));
    Ok(MetricsReport { per_domain_accuracy: per, subgroup_means, overall_target_mean, ..Default::default() })
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median Euclidean distance over all distinct pairs of the pooled rows.
pub fn median_pairwise_distance(x: &Mat, y: &Mat) -> f64 {
    let rows: Vec<_> = x.rows().into_iter().chain(y.rows()).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

pub fn default_bandwidths(x: &Mat, y: &Mat) -> Vec<f64> {
    let med = median_pairwise_distance(x, y).max(1e-12);
    BANDWIDTH_SCALES.iter().map(|s| s * med).collect()
}

fn mean_kernel(a: &Mat, b: &Mat, bandwidths: &[f64]) -> f64 {
    let mut total = 0.0;
    for ra in a.rows() {
        for rb in b.rows() {
            let d2 = sq_dist(ra, rb);
            total += bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>();
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// Biased (V-statistic) squared MMD with a sum of RBF kernels.
pub fn mmd_rbf(x: &Mat, y: &Mat, bandwidths: &[f64]) -> Result<f64> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return invalid_arg("MMD needs at least 2 samples per side");
    }
    if x.ncols() != y.ncols() {
        return invalid_arg("feature dimensions differ");
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0)) {
        return invalid_arg("bandwidths must be positive");
    }
    let v = mean_kernel(x, x, bandwidths) + mean_kernel(y, y, bandwidths) - 2.0 * mean_kernel(x, y, bandwidths);
    Ok(v.max(0.0))
}

/// Pairwise MMD between encoded domains. One bandwidth set, from the pooled
/// features of all domains, is shared by every pair so entries are comparable.
pub fn mmd_matrix(encoder: &EncoderModel, datasets: &[DomainDataset], max_rows: usize) -> Result<Vec<Vec<f64>>> {
    let feats: Vec<Mat> = datasets
        .iter()
        .map(|d| {
            let x = d.inputs();
            let n = x.nrows().min(max_rows);
            encoder.apply(&x.slice(ndarray::s![..n, ..]).to_owned())
        })
        .collect();
    if feats.is_empty() {
        return Ok(Vec::new());
    }
    // pooled heuristic on a thinned subset keeps the median cheap
    let per = (400 / feats.len()).max(2);
    let thin: Vec<Mat> = feats.iter().map(|f| f.slice(ndarray::s![..per.min(f.nrows()), ..]).to_owned()).collect();
    let views: Vec<_> = thin.iter().map(|m| m.view()).collect();
    let pooled = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| CdaError::InvalidArgument(e.to_string()))?;
    let bw = default_bandwidths(&pooled, &Mat::zeros((0, pooled.ncols())));
    let n = feats.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            let v = mmd_rbf(&feats[i], &feats[j], &bw)?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation via Pearson on average ranks; 0 if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid_arg("spearman inputs differ in length");
    }
    if a.len() < 2 {
        return Err(CdaError::InsufficientData("spearman needs at least 2 points".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation between each domain's distance to the nearest source
/// attribute and its accuracy. Uses every domain in the report; at least four
/// must be targets.
pub fn degradation_profile(report: &MetricsReport, source_attributes: &[f64]) -> Result<f64> {
    if source_attributes.is_empty() {
        return invalid_arg("at least one source attribute required");
    }
    let targets = report.per_domain_accuracy.iter().filter(|d| d.role != DomainRole::Source).count();
    if targets < 4 {
        return Err(CdaError::InsufficientData(format!("{targets} target domains, need 4")));
    }
    let dist: Vec<f64> = report
        .per_domain_accuracy
        .iter()
        .map(|d| source_attributes.iter().map(|s| (d.attribute - s).abs()).fold(f64::INFINITY, f64::min))
        .collect();
    let acc: Vec<f64> = report.per_domain_accuracy.iter().map(|d| d.accuracy).collect();
    spearman(&dist, &acc)
}

/// Spearman correlation between off-diagonal MMD entries and attribute gaps.
pub fn mmd_distance_correlation(matrix: &[Vec<f64>], attributes: &[f64]) -> Result<f64> {
    if matrix.len() != attributes.len() {
        return invalid_arg("matrix and attribute list differ in size");
    }
    let (mut m, mut d) = (Vec::new(), Vec::new());
    for i in 0..matrix.len() {
        for j in 0..i {
            m.push(matrix[i][j]);
            d.push((attributes[i] - attributes[j]).abs());
        }
    }
    if m.len() < 4 {
        return Err(CdaError::InsufficientData("need at least 4 domain pairs".into()));
    }
    spearman(&d, &m)
}
