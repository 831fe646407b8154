//! SVG figures derived from an evaluation report.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{MetricReport, RecordResult};

const Z95: f64 = 1.959_963_984_540_054;

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Least-squares line of HRE against ground-truth mass with a 95 %
/// confidence band for the fitted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct HreBand {
    pub points: Vec<(f64, f64)>,
    pub intercept: f64,
    pub slope: f64,
    /// `(x, lower, upper)` at evenly spaced x over the data range.
    pub band: Vec<(f64, f64, f64)>,
}

pub fn hre_band(points: &[(f64, f64)], samples: usize) -> Result<HreBand> {
    if points.is_empty() {
        return Err(Error::Domain("no HRE values to plot".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let s = if points.len() > 2 {
        let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (sse / (n - 2.0)).sqrt()
    } else {
        0.0
    };
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let samples = samples.max(2);
    let band = (0..samples)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
            let lever = if sxx > 0.0 { (x - mx).powi(2) / sxx } else { 0.0 };
            let half = Z95 * s * (1.0 / n + lever).sqrt();
            let y = intercept + slope * x;
            (x, y - half, y + half)
        })
        .collect();
    Ok(HreBand {
        points: points.to_vec(),
        intercept,
        slope,
        band,
    })
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad)..(hi + pad)
}

pub fn write_hre_plot(records: &[RecordResult], path: &Path) -> Result<()> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| Some((r.ground_truth.herbage_mass?, r.hre?)))
        .collect();
    let fit = hre_band(&points, 50)?;
    let xs = fit.points.iter().map(|p| p.0);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let ys = fit
        .points
        .iter()
        .map(|p| p.1)
        .chain(fit.band.iter().flat_map(|b| [b.1, b.2]))
        .chain([1.0]);
    let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));

    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("HRE vs ground-truth herbage mass", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .build_cartesian_2d(padded(x0, x1), padded(y0, y1))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("ground-truth herbage mass (kg DM/ha)")
        .y_desc("HRE")
        .draw()
        .map_err(plot_err)?;
    let band_color = RGBColor(70, 130, 180);
    let mut outline: Vec<(f64, f64)> = fit.band.iter().map(|b| (b.0, b.2)).collect();
    outline.extend(fit.band.iter().rev().map(|b| (b.0, b.1)));
    chart
        .draw_series(std::iter::once(Polygon::new(outline, band_color.mix(0.25).filled())))
        .map_err(plot_err)?
        .label("95% confidence band");
    chart
        .draw_series(LineSeries::new(
            fit.band.iter().map(|b| (b.0, fit.intercept + fit.slope * b.0)),
            band_color.stroke_width(2),
        ))
        .map_err(plot_err)?
        .label("least-squares fit");
    chart
        .draw_series(LineSeries::new([(x0, 1.0), (x1, 1.0)], BLACK.mix(0.5)))
        .map_err(plot_err)?;
    chart
        .draw_series(fit.points.iter().map(|&p| Circle::new(p, 4, RED.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One histogram of per-crop mass predictions per record that has them.
pub fn write_crop_histograms(records: &[RecordResult], path: &Path) -> Result<()> {
    let with_crops: Vec<&RecordResult> = records.iter().filter(|r| r.crops.is_some()).collect();
    if with_crops.is_empty() {
        return Err(Error::Domain("no crop predictions to plot".into()));
    }
    let cols = (with_crops.len() as f64).sqrt().ceil() as usize;
    let rows = with_crops.len().div_ceil(cols);
    let root = SVGBackend::new(path, (360 * cols as u32, 280 * rows as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (area, rec) in root.split_evenly((rows, cols)).iter().zip(&with_crops) {
        let agg = rec.crops.as_ref().expect("filtered");
        let edges = &agg.histogram.edges;
        let top = agg.histogram.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let caption = match rec.ground_truth.herbage_mass {
            Some(gt) => format!("{} (n={}, truth {gt:.0})", rec.id, agg.n),
            None => format!("{} (n={})", rec.id, agg.n),
        };
        let mut chart = ChartBuilder::on(area)
            .caption(caption, ("sans-serif", 15))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(36)
            .build_cartesian_2d(padded(edges[0], edges[edges.len() - 1]), 0.0..top * 1.1)
            .map_err(plot_err)?;
        chart.configure_mesh().x_labels(4).y_labels(4).draw().map_err(plot_err)?;
        chart
            .draw_series(agg.histogram.counts.iter().enumerate().map(|(i, &c)| {
                Rectangle::new([(edges[i], 0.0), (edges[i + 1], c as f64)], BLUE.mix(0.6).filled())
            }))
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new([(agg.mean, 0.0), (agg.mean, top * 1.05)], RED.stroke_width(2)))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Every figure the report supports; returns the files written.
pub fn write_all(report: &MetricReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if report.records.iter().any(|r| r.hre.is_some()) {
        let p = dir.join("hre_vs_ground_truth.svg");
        write_hre_plot(&report.records, &p)?;
        written.push(p);
    }
    if report.records.iter().any(|r| r.crops.is_some()) {
        let p = dir.join("crop_histograms.svg");
        write_crop_histograms(&report.records, &p)?;
        written.push(p);
    }
    if written.is_empty() {
        return Err(Error::Domain("report holds no per-record results to plot".into()));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_of_exact_line_is_degenerate() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 100.0, 0.9 + 0.0004 * i as f64 * 100.0)).collect();
        let b = hre_band(&pts, 5).unwrap();
        assert!((b.slope - 0.0004).abs() < 1e-12 && (b.intercept - 0.9).abs() < 1e-12);
        for (_, lo, hi) in &b.band {
            assert!((hi - lo).abs() < 1e-9);
        }
    }

    #[test]
    fn band_is_narrowest_at_the_mean() {
        let pts = [(0.0, 1.0), (1.0, 1.3), (2.0, 0.8), (3.0, 1.2), (4.0, 1.1)];
        let b = hre_band(&pts, 5).unwrap();
        let widths: Vec<f64> = b.band.iter().map(|(_, lo, hi)| hi - lo).collect();
        assert!(widths[2] < widths[0] && widths[2] < widths[4]);
        assert!((widths[0] - widths[4]).abs() < 1e-12);
        // Half width at the mean is z * s / sqrt(n).
        let fit = |x: f64| b.intercept + b.slope * x;
        let sse: f64 = pts.iter().map(|p| (p.1 - fit(p.0)).powi(2)).sum();
        let s = (sse / 3.0).sqrt();
        assert!((widths[2] / 2.0 - Z95 * s / 5f64.sqrt()).abs() < 1e-12);
    }
}
