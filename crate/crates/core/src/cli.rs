//! Experiment driver behind the `cdalab` binary.
//!
//! Every command takes a [`RunConfig`]. `gen` materializes a dataset
//! directory, `train` turns a dataset directory into a run directory:
//!
//! ```text
//! run_dir/
//!   config.json       full RunConfig, re-feedable to the CLI
//!   manifest.json     dataset manifest the run was trained on
//!   losses.csv        one row per step
//!   checkpoint.final  model parameters (JSON)
//!   metrics.json      evaluation report
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain_synth::io::{domain_file_name, read_dataset_dir, write_dataset_dir, DatasetManifest};
use crate::domain_synth::{
    build_split, domain_seed, make_constellation_with, AttributeRange, ConstellationParams, DomainDataset, GlyphSpec,
    Generator, PositionKind, SegmentKind, SplitRequest,
};
use crate::error::{invalid_config, CdaError, Result};
use crate::evalkit::{degradation_profile, mmd_distance_correlation, mmd_matrix, per_domain_accuracy, MetricsReport};
use crate::model::{CdaModel, Checkpoint, ModelConfig, PredictionRule};
use crate::theory::{run_theory_checks, TheoryCheckOptions, TheoryReport};
use crate::trainer::{train, TrainConfig, TrainLog, TrainingData, Variant};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.final";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Gauss2d,
    Glyph,
}

impl FromStr for Benchmark {
    type Err = CdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss2d" => Ok(Self::Gauss2d),
            "glyph" => Ok(Self::Glyph),
            other => invalid_config(format!("unknown benchmark {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub rule: PredictionRule,
    /// Compute the pairwise MMD matrix on encoder features.
    pub mmd: bool,
    /// Rows per domain fed to the MMD estimate.
    pub mmd_max_rows: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { rule: PredictionRule::Mean, mmd: true, mmd_max_rows: 150 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: Benchmark,
    pub num_classes: usize,
    pub grid_size: usize,
    pub attribute_range: AttributeRange,
    pub samples_per_domain: usize,
    pub constellation: ConstellationParams,
    pub glyph_resolution: usize,
    pub glyph_noise_std: f64,
    pub position_kind: PositionKind,
    pub segment_kind: Option<SegmentKind>,
    /// Explicit source grid indices; `None` uses the position default.
    pub sources: Option<(usize, usize)>,
    pub probe_fraction: f64,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::Gauss2d,
            num_classes: 4,
            grid_size: 9,
            attribute_range: AttributeRange::default(),
            samples_per_domain: 300,
            constellation: ConstellationParams::default(),
            glyph_resolution: 16,
            glyph_noise_std: 0.1,
            position_kind: PositionKind::P1,
            segment_kind: None,
            sources: None,
            probe_fraction: 0.5,
            data_seed: 0,
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            data_dir: PathBuf::from("runs/data"),
            run_dir: PathBuf::from("runs/run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the value at a dotted key path, e.g. `train.steps=200`. The value
    /// is read as JSON when it parses, otherwise as a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                serde_json::Value::Object(m) if m.contains_key(part) => m.get_mut(part).expect("checked"),
                _ => return invalid_config(format!("unknown config key {key:?}")),
            };
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(root).map_err(|e| CdaError::InvalidConfiguration(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        match self.benchmark {
            Benchmark::Gauss2d => ModelConfig::gauss2d(self.num_classes),
            Benchmark::Glyph => ModelConfig::glyph(self.glyph_resolution, self.num_classes),
        }
    }

    pub fn split_request(&self) -> SplitRequest {
        SplitRequest {
            position: self.position_kind,
            segment: self.segment_kind,
            sources: self.sources,
            probe_fraction: self.probe_fraction,
            seed: self.data_seed,
        }
    }

    fn generator(&self) -> Result<Generator> {
        Ok(match self.benchmark {
            Benchmark::Gauss2d => {
                Generator::Gauss2d(make_constellation_with(self.num_classes, self.data_seed, &self.constellation)?)
            }
            Benchmark::Glyph => Generator::Glyph {
                spec: GlyphSpec { num_classes: self.num_classes, noise_std: self.glyph_noise_std, base_seed: self.data_seed },
                resolution: self.glyph_resolution,
            },
        })
    }
}

/// Builds every grid domain and the manifest in memory.
pub fn generate(cfg: &RunConfig) -> Result<(DatasetManifest, Vec<DomainDataset>)> {
    if cfg.samples_per_domain == 0 {
        return invalid_config("samples_per_domain must be positive");
    }
    let generator = cfg.generator()?;
    let grid = cfg.attribute_range.grid(cfg.grid_size)?;
    let split = build_split(&grid, &cfg.split_request())?;
    let roles = split.roles();
    let domain_seeds: Vec<u64> = (0..grid.len()).map(|i| domain_seed(cfg.data_seed, i)).collect();
    let mut domains = Vec::with_capacity(grid.len());
    for (i, &a) in grid.iter().enumerate() {
        let d = generator.sample(cfg.attribute_range.value(a)?, cfg.samples_per_domain, domain_seeds[i])?;
        domains.push(d.with_role(roles[i]));
    }
    let manifest = DatasetManifest {
        benchmark: serde_json::to_value(cfg.benchmark)?.as_str().unwrap_or_default().to_string(),
        generator,
        split,
        roles,
        samples_per_domain: cfg.samples_per_domain,
        data_seed: cfg.data_seed,
        domain_seeds,
        domain_files: (0..grid.len()).map(domain_file_name).collect(),
    };
    Ok((manifest, domains))
}

/// SHA-256 over the sorted file names and contents of a directory tree.
pub fn dir_digest(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(path)?);
        h.update([0]);
    }
    Ok(hex(&h.finalize()))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenOutput {
    pub data_dir: PathBuf,
    pub digest: String,
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<GenOutput> {
    let (manifest, domains) = generate(cfg)?;
    write_dataset_dir(&cfg.data_dir, &manifest, &domains)?;
    Ok(GenOutput { data_dir: cfg.data_dir.clone(), digest: dir_digest(&cfg.data_dir)? })
}

fn model_config_for(manifest: &DatasetManifest) -> ModelConfig {
    match &manifest.generator {
        Generator::Gauss2d(c) => ModelConfig::gauss2d(c.num_classes),
        Generator::Glyph { spec, resolution } => ModelConfig::glyph(*resolution, spec.num_classes),
    }
}

/// Accuracy report plus the MMD profile and both rank correlations.
pub fn evaluate(
    model: &CdaModel,
    manifest: &DatasetManifest,
    domains: &[DomainDataset],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let mut report = per_domain_accuracy(model, domains, Some(&manifest.split), opts.rule)?;
    let sources: Vec<f64> = manifest.split.source_indices.iter().map(|&i| manifest.split.attribute_grid[i]).collect();
    report.degradation_correlation = match degradation_profile(&report, &sources) {
        Ok(r) => Some(r),
        Err(CdaError::InsufficientData(_)) => None,
        Err(e) => return Err(e),
    };
    if opts.mmd {
        let m = mmd_matrix(&model.encoder, domains, opts.mmd_max_rows)?;
        report.mmd_distance_correlation = match mmd_distance_correlation(&m, &manifest.split.attribute_grid) {
            Ok(r) => Some(r),
            Err(CdaError::InsufficientData(_)) => None,
            Err(e) => return Err(e),
        };
        report.mmd_matrix = Some(m);
    }
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub model: CdaModel,
    pub log: TrainLog,
    pub metrics: MetricsReport,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.train.validate()?;
    let (manifest, domains) = read_dataset_dir(&cfg.data_dir)?;
    let mc = model_config_for(&manifest);
    let data = TrainingData::from_manifest(&manifest.split, &domains)?;
    let (model, log) = train(&cfg.train, &mc, &data)?;

    let dir = &cfg.run_dir;
    fs::create_dir_all(dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    log.save_csv(&dir.join(LOSSES_FILE))?;
    Checkpoint::capture(&model, &mc, cfg.train.seed, cfg.train.steps).save(&dir.join(CHECKPOINT_FILE))?;
    let metrics = evaluate(&model, &manifest, &domains, &cfg.eval)?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?)?;
    Ok(TrainOutput { run_dir: dir.clone(), model, log, metrics })
}

/// Re-evaluates the checkpoint in `cfg.run_dir` and rewrites `metrics.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let dir = &cfg.run_dir;
    let model = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?.restore()?;
    let (manifest, domains) = read_dataset_dir(&cfg.data_dir)?;
    let metrics = evaluate(&model, &manifest, &domains, &cfg.eval)?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Seed number, or `mean` for the per-variant average row.
    pub seed: String,
    pub s1: f64,
    pub s2: f64,
    pub probe: f64,
    pub unseen: f64,
    pub target_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_of(&self, variant: Variant) -> Option<&AblationRow> {
        let name = variant.to_string();
        self.rows.iter().find(|r| r.variant == name && r.seed == "mean")
    }
}

/// Trains every variant on every seed. Seed `s` fixes the dataset, the
/// split and the training seed, so all variants of one seed see the same
/// data. Each cell gets its own dataset and run directory under `run_dir`.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    if variants.is_empty() {
        return invalid_config("ablation needs at least one variant");
    }
    if seeds.is_empty() {
        return invalid_config("ablation needs at least one seed");
    }
    cfg.train.validate()?;
    let root = &cfg.run_dir;
    let mut table = AblationTable::default();
    for &v in variants {
        let mut cells = Vec::new();
        for &s in seeds {
            let mut cell = cfg.clone();
            cell.data_seed = cfg.data_seed.wrapping_add(s);
            cell.data_dir = root.join(format!("data-seed{s}"));
            cell.run_dir = root.join(format!("{v}-seed{s}"));
            cell.train.variant = v;
            cell.train.seed = s;
            if !cell.data_dir.join(MANIFEST_FILE).exists() {
                cmd_gen(&cell)?;
            }
            let m = cmd_train(&cell)?.metrics;
            let g = &m.subgroup_means;
            cells.push(AblationRow {
                variant: v.to_string(),
                seed: s.to_string(),
                s1: g.s1.unwrap_or(f64::NAN),
                s2: g.s2.unwrap_or(f64::NAN),
                probe: g.probe.unwrap_or(f64::NAN),
                unseen: g.unseen.unwrap_or(f64::NAN),
                target_mean: m.overall_target_mean.unwrap_or(f64::NAN),
            });
        }
        let n = cells.len() as f64;
        let avg = |f: fn(&AblationRow) -> f64| cells.iter().map(f).sum::<f64>() / n;
        let mean = AblationRow {
            variant: v.to_string(),
            seed: "mean".into(),
            s1: avg(|r| r.s1),
            s2: avg(|r| r.s2),
            probe: avg(|r| r.probe),
            unseen: avg(|r| r.unseen),
            target_mean: avg(|r| r.target_mean),
        };
        table.rows.extend(cells);
        table.rows.push(mean);
    }
    fs::create_dir_all(root)?;
    let mut w = csv::Writer::from_path(root.join(ABLATION_FILE)).map_err(|e| CdaError::Io(e.into()))?;
    for r in &table.rows {
        w.serialize(r).map_err(|e| CdaError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(table)
}

pub fn cmd_theory_check(opts: &TheoryCheckOptions) -> Result<TheoryReport> {
    run_theory_checks(opts)
}

/// Writes `accuracy.svg`, `losses.svg` and, when present, `mmd.svg` into the
/// run directory. Returns the written paths.
pub fn cmd_plot(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics: MetricsReport = serde_json::from_str(&fs::read_to_string(run_dir.join(METRICS_FILE))?)?;
    let losses = crate::plot::read_losses(&run_dir.join(LOSSES_FILE))?;
    let mut out = vec![run_dir.join("accuracy.svg"), run_dir.join("losses.svg")];
    crate::plot::accuracy_curve(&metrics, &out[0])?;
    crate::plot::loss_traces(&losses, &out[1])?;
    if let Some(m) = &metrics.mmd_matrix {
        let p = run_dir.join("mmd.svg");
        crate::plot::mmd_heatmap(m, &p)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.train.aux_learning_rate = Some(0.1 + 0.2);
        cfg.segment_kind = Some(SegmentKind::S3);
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("train.steps", "17").unwrap();
        cfg.set("train.variant", "V5").unwrap();
        cfg.set("segment_kind", "S2").unwrap();
        cfg.set("run_dir", "/tmp/x").unwrap();
        assert_eq!(cfg.train.steps, 17);
        assert_eq!(cfg.train.variant, Variant::V5);
        assert_eq!(cfg.segment_kind, Some(SegmentKind::S2));
        assert_eq!(cfg.run_dir, PathBuf::from("/tmp/x"));
        assert!(matches!(cfg.set("train.nope", "1"), Err(CdaError::InvalidConfiguration(_))));
        assert!(matches!(cfg.set("benchmark", "mnist"), Err(CdaError::InvalidConfiguration(_))));
    }

    #[test]
    fn generate_counts() {
        let cfg = RunConfig { samples_per_domain: 20, ..Default::default() };
        let (m, d) = generate(&cfg).unwrap();
        assert_eq!(d.len(), 9);
        assert_eq!(m.domain_files.len(), 9);
        assert!(d.iter().all(|x| x.len() == 20 && x.labeled));
    }
}
