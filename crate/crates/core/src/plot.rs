//! SVG figures for a run directory. Plots are artifacts only; nothing reads
//! them back.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{CdaError, Result};
use crate::evalkit::MetricsReport;

fn draw_err<E: std::fmt::Display>(e: E) -> CdaError {
    CdaError::Io(std::io::Error::other(e.to_string()))
}

/// Loss columns of `losses.csv` keyed by step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossSeries {
    pub step: Vec<f64>,
    pub columns: Vec<(String, Vec<f64>)>,
}

pub fn read_losses(path: &Path) -> Result<LossSeries> {
    let mut r = csv::Reader::from_path(path).map_err(draw_err)?;
    let header = r.headers().map_err(draw_err)?.clone();
    let names = ["l_p", "l_gp", "l_s", "l_ce", "clf_l2"];
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == *n).ok_or_else(|| CdaError::InvalidConfiguration(format!("missing column {n}"))))
        .collect::<Result<_>>()?;
    let mut s = LossSeries { columns: names.iter().map(|n| (n.to_string(), Vec::new())).collect(), ..Default::default() };
    for rec in r.records() {
        let rec = rec.map_err(draw_err)?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(draw_err);
        s.step.push(num(0)?);
        for (c, &i) in s.columns.iter_mut().zip(&idx) {
            c.1.push(num(i)?);
        }
    }
    Ok(s)
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Accuracy against attribute, one marker style per role.
pub fn accuracy_curve(report: &MetricsReport, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (x0, x1) = bounds(report.per_domain_accuracy.iter().map(|d| d.attribute));
    let mut chart = ChartBuilder::on(&root)
        .caption("accuracy vs attribute", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(40)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("attribute").y_desc("accuracy").draw().map_err(draw_err)?;
    let pts: Vec<(f64, f64)> = report.per_domain_accuracy.iter().map(|d| (d.attribute, d.accuracy)).collect();
    chart.draw_series(LineSeries::new(pts.clone(), &BLUE)).map_err(draw_err)?;
    use crate::domain_synth::DomainRole::*;
    for (role, color) in [(Source, RED), (ProbeTarget, GREEN), (UnseenTarget, BLUE)] {
        let marks = report
            .per_domain_accuracy
            .iter()
            .filter(|d| d.role == role)
            .map(|d| Circle::new((d.attribute, d.accuracy), 4, color.filled()));
        chart
            .draw_series(marks)
            .map_err(draw_err)?
            .label(format!("{role:?}"))
            .legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Pairwise MMD matrix as a grey-scale heat map, darker for smaller values.
pub fn mmd_heatmap(m: &[Vec<f64>], path: &Path) -> Result<()> {
    let n = m.len();
    let root = SVGBackend::new(path, (480, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (_, hi) = bounds(m.iter().flatten().copied());
    let mut chart = ChartBuilder::on(&root)
        .caption("MMD between domains", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(28)
        .y_label_area_size(28)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(draw_err)?;
    chart.configure_mesh().disable_mesh().draw().map_err(draw_err)?;
    let cells = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| {
        let t = (m[i][j] / hi).clamp(0.0, 1.0);
        let g = (255.0 * t) as u8;
        Rectangle::new([(j, n - 1 - i), (j + 1, n - i)], RGBColor(g, g, g).filled())
    });
    chart.draw_series(cells).map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Every loss column against step, zero entries (inactive steps) skipped.
pub fn loss_traces(s: &LossSeries, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (x0, x1) = bounds(s.step.iter().copied());
    let (y0, y1) = bounds(s.columns.iter().flat_map(|c| c.1.iter().copied()).filter(|v| *v != 0.0));
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("step").draw().map_err(draw_err)?;
    for (k, (name, v)) in s.columns.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts = s.step.iter().zip(v).filter(|(_, y)| **y != 0.0).map(|(x, y)| (*x, *y));
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)
}
