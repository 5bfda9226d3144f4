//! Dataset directory layout: `manifest.json` plus one CSV per grid domain with
//! columns `attribute, y, x_0 .. x_{d-1}` in that order. `y` is empty for
//! unlabeled rows.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::SplitManifest;
use super::{AttributeValue, DomainDataset, DomainRole, DomainSample, Generator};
use crate::error::{CdaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub benchmark: String,
    pub generator: Generator,
    pub split: SplitManifest,
    pub roles: Vec<DomainRole>,
    pub samples_per_domain: usize,
    pub data_seed: u64,
    pub domain_seeds: Vec<u64>,
    pub domain_files: Vec<String>,
}

pub fn domain_file_name(index: usize) -> String {
    format!("domain_{index:02}.csv")
}

pub fn write_domain_csv(path: &Path, data: &DomainDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = data.input_dim();
    let mut header = vec!["attribute".to_string(), "y".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let attr = data.attribute.get().to_string();
    for s in &data.samples {
        let mut rec = Vec::with_capacity(d + 2);
        rec.push(attr.clone());
        rec.push(s.y.map(|y| y.to_string()).unwrap_or_default());
        rec.extend(s.x.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_domain_csv(path: &Path, role: DomainRole) -> Result<DomainDataset> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("attribute") || header.get(1) != Some("y") {
        return Err(CdaError::InvalidConfiguration(format!(
            "{}: expected leading columns attribute,y",
            path.display()
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| CdaError::InvalidConfiguration(format!("{}: {e}", path.display())))
    };
    let mut samples = Vec::new();
    let mut attribute = None;
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        attribute.get_or_insert(parse(&rec[0])?);
        let y = match &rec[1] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|e| {
                CdaError::InvalidConfiguration(format!("{}: bad label {s:?}: {e}", path.display()))
            })?),
        };
        let x = rec.iter().skip(2).map(parse).collect::<Result<Vec<_>>>()?;
        samples.push(DomainSample { x, y });
    }
    let labeled = !samples.is_empty() && samples.iter().all(|s| s.y.is_some());
    Ok(DomainDataset {
        samples,
        attribute: AttributeValue::degrees(attribute.unwrap_or(f64::NAN)),
        labeled,
        role,
    })
}

pub fn write_dataset_dir(dir: &Path, manifest: &DatasetManifest, domains: &[DomainDataset]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (file, data) in manifest.domain_files.iter().zip(domains) {
        write_domain_csv(&dir.join(file), data)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset_dir(dir: &Path) -> Result<(DatasetManifest, Vec<DomainDataset>)> {
    let manifest = read_manifest(dir)?;
    let domains = manifest
        .domain_files
        .iter()
        .zip(&manifest.roles)
        .map(|(f, &role)| read_domain_csv(&dir.join(f), role))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, domains))
}

fn csv_err(e: csv::Error) -> CdaError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CdaError::Io(io),
            _ => unreachable!(),
        }
    } else {
        CdaError::InvalidConfiguration(e.to_string())
    }
}
