//! Results tables (CSV in, markdown out) and accuracy-vs-fraction plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::training::{summarize, SummaryRow, SweepAxis, SweepRow};
use crate::{Error, Result};

pub fn write_results_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

/// One row per sweep cell: mean and sample std of fold accuracy.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
    Ok(rows)
}

/// Every `*.csv` under `dir` (non-recursive) that parses as a results table.
pub fn collect_results(dir: &Path) -> Result<Vec<SweepRow>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        if let Ok(mut r) = read_results_csv(&f) {
            rows.append(&mut r);
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no results found in {}", dir.display())));
    }
    Ok(rows)
}

fn pct(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

/// One row per experiment: accuracy over folds when fine-tuning on all
/// training trials. Pre-training sweep rows are left to [`fraction_table`].
pub fn accuracy_table(rows: &[SweepRow]) -> String {
    let full: Vec<SweepRow> = rows
        .iter()
        .filter(|r| r.axis == SweepAxis::FinetuneFraction.name() && (r.fraction - 1.0).abs() < 1e-12)
        .cloned()
        .collect();
    let mut by_exp: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &full {
        by_exp.entry(r.experiment_id.clone()).or_default().push(r.accuracy);
    }
    let mut out = String::from("| experiment | folds | accuracy (%) |\n|---|---|---|\n");
    for (exp, acc) in by_exp {
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let std = if acc.len() > 1 {
            (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.push_str(&format!("| {exp} | {} | {} |\n", acc.len(), pct(mean, std)));
    }
    out
}

/// Accuracy per experiment and fraction along one sweep axis.
pub fn fraction_table(rows: &[SweepRow], axis: &str) -> String {
    let summary: Vec<SummaryRow> = summarize(rows).into_iter().filter(|s| s.axis == axis).collect();
    let mut out = format!("| experiment | {axis} | folds | accuracy (%) |\n|---|---|---|---|\n");
    for s in summary {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            s.experiment_id,
            s.fraction,
            s.n_folds,
            pct(s.mean, s.std)
        ));
    }
    out
}

/// SVG line plot of mean accuracy (%) against fraction (%), one series per
/// experiment, with ±1 std whiskers.
pub fn plot_accuracy_vs_fraction(rows: &[SweepRow], axis: &str, path: &Path) -> Result<()> {
    let summary: Vec<SummaryRow> = summarize(rows).into_iter().filter(|s| s.axis == axis).collect();
    if summary.is_empty() {
        return Err(Error::Data(format!("no {axis} results to plot")));
    }
    let mut series: BTreeMap<String, Vec<&SummaryRow>> = BTreeMap::new();
    for s in &summary {
        series.entry(s.experiment_id.clone()).or_default().push(s);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("accuracy vs {axis}"), ("sans-serif", 22))
            .margin(16)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..105f64, 0f64..105f64)?;
        chart.configure_mesh().x_desc(format!("{axis} (%)")).y_desc("accuracy (%)").draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let mut xy: Vec<(f64, f64)> = pts.iter().map(|s| (100.0 * s.fraction, 100.0 * s.mean)).collect();
            xy.sort_by(|a, b| a.0.total_cmp(&b.0));
            chart
                .draw_series(LineSeries::new(xy.clone(), color.stroke_width(2)))?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            chart.draw_series(xy.iter().map(|&p| Circle::new(p, 4, color.filled())))?;
            chart.draw_series(pts.iter().map(|s| {
                let x = 100.0 * s.fraction;
                PathElement::new(vec![(x, 100.0 * (s.mean - s.std)), (x, 100.0 * (s.mean + s.std))], color)
            }))?;
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Data(format!("plot {}: {e}", path.display())))
}
