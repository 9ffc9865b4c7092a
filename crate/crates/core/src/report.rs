//! Evaluation artifacts: JSON and CSV tables, clinician estimate ingestion and
//! static SVG plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, PR_TOLERANCE};

/// Paths written by [`write_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub per_image_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::data(path, e.to_string())
}

pub fn write_json(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row per image. The `pr_clinician` column appears only when estimates
/// were supplied.
pub fn write_per_image_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let with_cli = report.aggregate.clinician_pr_percent.is_some();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id", "iou_teeth", "iou_plaque", "dice_teeth", "dice_plaque", "pr_gt", "pr_pred"];
    if with_cli {
        header.push("pr_clinician");
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for m in &report.per_image {
        let mut row = vec![
            m.id.clone(),
            m.iou_teeth.to_string(),
            m.iou_plaque.to_string(),
            m.dice_teeth.to_string(),
            m.dice_plaque.to_string(),
            m.pr_gt.to_string(),
            m.pr_pred.to_string(),
        ];
        if with_cli {
            row.push(m.pr_clinician.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Single-row aggregate table.
pub fn write_summary_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let a = &report.aggregate;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["aggregation", "eval_mode", "images", "miou_teeth", "miou_plaque", "dice_teeth", "dice_plaque", "pr_percent"];
    let aggregation = serde_json::to_value(report.aggregation)?
        .as_str()
        .unwrap_or_default()
        .to_string();
    let mut row = vec![
        aggregation,
        report.eval_mode.clone(),
        report.per_image.len().to_string(),
        a.miou_teeth.to_string(),
        a.miou_plaque.to_string(),
        a.dice_teeth.to_string(),
        a.dice_plaque.to_string(),
        a.pr_percent.to_string(),
    ];
    if let Some(c) = a.clinician_pr_percent {
        header.push("clinician_pr_percent");
        row.push(c.to_string());
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    w.write_record(&row).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct ClinicianRow {
    id: String,
    pr: f64,
}

/// Clinician estimates from a CSV with header `id,pr`, PR in [0, 1].
pub fn read_clinician_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize::<ClinicianRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if !(0.0..=1.0).contains(&row.pr) {
            return Err(Error::data(path, format!("pr {} for `{}` outside [0, 1]", row.pr, row.id)));
        }
        if out.insert(row.id.clone(), row.pr).is_some() {
            return Err(Error::data(path, format!("duplicate id `{}`", row.id)));
        }
    }
    Ok(out)
}

/// Grouped bars of per-image Dice for both categories.
pub fn plot_dice_bars(report: &EvalReport, path: &Path) -> Result<()> {
    let n = report.per_image.len();
    let width = (160 + 24 * n as u32).clamp(480, 4000);
    let root = SVGBackend::new(path, (width, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Per-image Dice", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..n.max(1) as f64, 0f64..1.0)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc("image")
        .y_desc("Dice")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let series = [
        ("teeth", BLUE, 0.1, report.per_image.iter().map(|m| m.dice_teeth).collect::<Vec<_>>()),
        ("plaque", RED, 0.5, report.per_image.iter().map(|m| m.dice_plaque).collect()),
    ];
    for (label, color, offset, values) in series {
        chart
            .draw_series(values.iter().enumerate().map(|(i, &v)| {
                let x0 = i as f64 + offset;
                Rectangle::new([(x0, 0.0), (x0 + 0.4, v)], color.filled())
            }))
            .map_err(|e| plot_err(path, e))?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Box plot of the per-image Dice distribution per category.
pub fn plot_dice_box(report: &EvalReport, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (420, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let cats = ["teeth", "plaque"];
    let mut chart = ChartBuilder::on(&root)
        .caption("Dice distribution", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(44)
        .build_cartesian_2d(cats.into_segmented(), 0f32..1.0)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().y_desc("Dice").draw().map_err(|e| plot_err(path, e))?;
    let teeth: Vec<f64> = report.per_image.iter().map(|m| m.dice_teeth).collect();
    let plaque: Vec<f64> = report.per_image.iter().map(|m| m.dice_plaque).collect();
    let boxes = [(&cats[0], Quartiles::new(&teeth), BLUE), (&cats[1], Quartiles::new(&plaque), RED)];
    chart
        .draw_series(
            boxes
                .iter()
                .map(|(c, q, color)| Boxplot::new_vertical(SegmentValue::CenterOf(*c), q).style(*color).width(40)),
        )
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Predicted against ground-truth plaque ratio, with the identity line and the
/// tolerance band used for PR%.
pub fn plot_pr_scatter(report: &EvalReport, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (420, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Plaque ratio", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(34)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1.0, 0f64..1.0)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("PR ground truth")
        .y_desc("PR predicted")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let t = PR_TOLERANCE;
    let band = vec![(0.0, 0.0), (1.0 - t, 1.0), (1.0, 1.0), (1.0, 1.0 - t), (t, 0.0)];
    let band: Vec<(f64, f64)> = band.into_iter().chain([(0.0, t)]).collect();
    chart
        .draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.12))))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.6)))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(report.per_image.iter().map(|m| Circle::new((m.pr_gt, m.pr_pred), 3, RED.filled())))
        .map_err(|e| plot_err(path, e))?
        .label("model")
        .legend(|(x, y)| Circle::new((x + 5, y), 3, RED.filled()));
    if report.aggregate.clinician_pr_percent.is_some() {
        chart
            .draw_series(
                report
                    .per_image
                    .iter()
                    .filter_map(|m| m.pr_clinician.map(|c| TriangleMarker::new((m.pr_gt, c), 4, GREEN.filled()))),
            )
            .map_err(|e| plot_err(path, e))?
            .label("clinician")
            .legend(|(x, y)| TriangleMarker::new((x + 5, y), 4, GREEN.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperLeft)
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// `report.json`, `per_image.csv`, `summary.csv` and the three plots in `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        json: dir.join("report.json"),
        per_image_csv: dir.join("per_image.csv"),
        summary_csv: dir.join("summary.csv"),
        plots: vec![dir.join("dice_bars.svg"), dir.join("dice_box.svg"), dir.join("pr_scatter.svg")],
    };
    write_json(report, &files.json)?;
    write_per_image_csv(report, &files.per_image_csv)?;
    write_summary_csv(report, &files.summary_csv)?;
    plot_dice_bars(report, &files.plots[0])?;
    plot_dice_box(report, &files.plots[1])?;
    plot_pr_scatter(report, &files.plots[2])?;
    Ok(files)
}
