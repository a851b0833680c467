//! Scatter plot of projected features: one color per class, real samples as
//! dots, synthetic samples as outlined triangles.

use std::path::Path;

use plotters::prelude::*;
use serde::Serialize;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub kind: PointKind,
    pub class: usize,
    /// Dataset index for real points, code index for synthetic ones.
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

fn padded_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return -1.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad)..(hi + pad)
}

pub fn write_scatter_svg(path: &Path, points: &[ScatterPoint], title: &str) -> Result<(), CliError> {
    let plot_err = |e: &dyn std::fmt::Display| CliError::Plot(e.to_string());
    let root = SVGBackend::new(path, (800, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(padded_range(points.iter().map(|p| p.x)), padded_range(points.iter().map(|p| p.y)))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("PC 1")
        .y_desc("PC 2")
        .disable_mesh()
        .draw()
        .map_err(|e| plot_err(&e))?;
    let color = |c: usize| Palette99::pick(c).to_rgba();
    chart
        .draw_series(
            points
                .iter()
                .filter(|p| p.kind == PointKind::Real)
                .map(|p| Circle::new((p.x, p.y), 3, color(p.class).mix(0.5).filled())),
        )
        .map_err(|e| plot_err(&e))?;
    for p in points.iter().filter(|p| p.kind == PointKind::Synthetic) {
        chart
            .draw_series([
                TriangleMarker::new((p.x, p.y), 8, color(p.class).filled()),
                TriangleMarker::new((p.x, p.y), 8, BLACK.stroke_width(1)),
            ])
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

pub fn write_scatter_csv(path: &Path, points: &[ScatterPoint]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Plot(e.to_string()))?;
    for p in points {
        w.serialize(p).map_err(|e| CliError::Plot(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
