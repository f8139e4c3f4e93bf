//! Static SVG figures from the artifacts listed in a run's manifest:
//! space-time heatmaps, DN traces, residual-vs-K curves, linearization
//! error curves and recovered-vs-true coefficient overlays.

use std::path::{Path, PathBuf};

use fraclab_core::io;
use plotters::prelude::*;

use crate::run::{Manifest, ManifestEntry, MANIFEST};

type Table = (Vec<String>, Vec<Vec<f64>>);

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("{0}")]
    Io(#[from] fraclab_core::Error),
    #[error("drawing: {0}")]
    Draw(String),
}

fn draw_err<E: std::fmt::Debug>(e: E) -> PlotError {
    PlotError::Draw(format!("{e:?}"))
}

const SIZE: (u32, u32) = (800, 500);

/// Render every plottable artifact of the run in `dir` into `dir/plots`.
/// Unreadable or unplottable series are skipped with a warning on stderr.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST))?;
    let out_dir = dir.join("plots");
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    for entry in &manifest.files {
        match plot_entry(dir, &out_dir, entry) {
            Ok(Some(path)) => written.push(path),
            Ok(None) => {}
            Err(e) => skipped.push(format!("{}: {e}", entry.path)),
        }
    }
    for s in skipped {
        eprintln!("warning: skipped {s}");
    }
    Ok(written)
}

fn plot_entry(
    dir: &Path,
    out_dir: &Path,
    entry: &ManifestEntry,
) -> Result<Option<PathBuf>, PlotError> {
    let render: fn(&Table, &str) -> Result<String, PlotError> = match entry.kind.as_str() {
        "solution" | "jet-spacetime" => heatmap,
        "dn" => dn_traces,
        "runge-residuals" => residual_curves,
        "linearize" => linearization_curves,
        "jet" => jet_overlay,
        _ => return Ok(None),
    };
    let table = io::read_csv(&dir.join(&entry.path))?;
    if table.1.is_empty() {
        return Err(PlotError::Draw("no rows".into()));
    }
    let stem = entry.path.trim_end_matches(".csv").replace('/', "_");
    let svg = render(&table, &stem)?;
    let path = out_dir.join(format!("{stem}.svg"));
    io::atomic_write(&path, svg.as_bytes())?;
    Ok(Some(path))
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo <= f64::EPSILON * (1.0 + lo.abs()) {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Diverging blue-white-red map on `[-m, m]`.
fn diverging(v: f64, m: f64) -> RGBColor {
    let r = if m > 0.0 {
        (v / m).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let fade = |c: f64| (255.0 * (1.0 - c.abs())) as u8;
    if r >= 0.0 {
        RGBColor(255, fade(r), fade(r))
    } else {
        RGBColor(fade(r), fade(r), 255)
    }
}

fn x_of(header: &str) -> Option<f64> {
    header.strip_prefix("x=")?.parse().ok()
}

/// Rows are time levels (first column `t`), columns lattice points.
fn heatmap((header, rows): &Table, title: &str) -> Result<String, PlotError> {
    let xs: Vec<f64> = header.iter().skip(1).filter_map(|h| x_of(h)).collect();
    if xs.len() + 1 != header.len() || xs.len() < 2 {
        return Err(PlotError::Draw("not a space-time table".into()));
    }
    let ts: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let m = rows
        .iter()
        .flat_map(|r| r[1..].iter())
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let dx = xs[1] - xs[0];
    let dt = if ts.len() > 1 { ts[1] - ts[0] } else { 1.0 };
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{title} (|max| = {m:.3e})"), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(
                xs[0] - 0.5 * dx..xs[xs.len() - 1] + 0.5 * dx,
                ts[0] - 0.5 * dt..ts[ts.len() - 1] + 0.5 * dt,
            )
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc("x")
            .y_desc("t")
            .disable_mesh()
            .draw()
            .map_err(draw_err)?;
        chart
            .draw_series(rows.iter().enumerate().flat_map(|(k, r)| {
                let t = ts[k];
                xs.iter().zip(&r[1..]).map(move |(&x, &v)| {
                    Rectangle::new(
                        [(x - 0.5 * dx, t - 0.5 * dt), (x + 0.5 * dx, t + 0.5 * dt)],
                        diverging(v, m).filled(),
                    )
                })
            }))
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

/// Up to six V columns over time.
fn dn_traces((header, rows): &Table, title: &str) -> Result<String, PlotError> {
    let n_cols = header.len() - 1;
    if n_cols == 0 {
        return Err(PlotError::Draw("no V columns".into()));
    }
    let k = n_cols.min(6);
    let mut picks: Vec<usize> = (0..k)
        .map(|j| {
            if k > 1 {
                1 + j * (n_cols - 1) / (k - 1)
            } else {
                1
            }
        })
        .collect();
    picks.dedup();
    let (t0, t1) = finite_range(rows.iter().map(|r| r[0]));
    let (y0, y1) = finite_range(rows.iter().flat_map(|r| picks.iter().map(move |&c| r[c])));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("DN traces: {title}"), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(70)
            .build_cartesian_2d(t0..t1, y0..y1)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc("t")
            .y_desc("(-Δ)^s u on V")
            .draw()
            .map_err(draw_err)?;
        for (j, &c) in picks.iter().enumerate() {
            let color = Palette99::pick(j).to_rgba();
            chart
                .draw_series(LineSeries::new(
                    rows.iter().map(|r| (r[0], r[c])),
                    color.stroke_width(2),
                ))
                .map_err(draw_err)?
                .label(header[c].clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

/// Log-scale curves of columns 1.. against column 0.
fn log_curves(
    points: Vec<(String, Vec<(f64, f64)>)>,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    log_x: bool,
) -> Result<String, PlotError> {
    let positive = |v: &f64| v.is_finite() && *v > 0.0;
    let all: Vec<(f64, f64)> = points.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if !all.iter().any(|(_, y)| positive(y)) {
        return Err(PlotError::Draw("no positive values for a log axis".into()));
    }
    let (x0, x1) = finite_range(all.iter().map(|p| p.0));
    let (y0, y1) = finite_range(all.iter().map(|p| p.1).filter(positive));
    let (y0, y1) = (y0 / 1.5, y1 * 1.5);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut builder = ChartBuilder::on(&root);
        builder
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(70);
        macro_rules! draw {
            ($chart:expr) => {{
                let mut chart = $chart.map_err(draw_err)?;
                chart
                    .configure_mesh()
                    .x_desc(x_desc)
                    .y_desc(y_desc)
                    .draw()
                    .map_err(draw_err)?;
                for (j, (name, pts)) in points.iter().enumerate() {
                    let color = Palette99::pick(j).to_rgba();
                    let pts: Vec<(f64, f64)> =
                        pts.iter().copied().filter(|p| positive(&p.1)).collect();
                    chart
                        .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                        .map_err(draw_err)?
                        .label(name.clone())
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
                    chart
                        .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                        .map_err(draw_err)?;
                }
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(draw_err)?;
            }};
        }
        if log_x {
            let (x0, x1) = (x0 / 1.2, x1 * 1.2);
            draw!(builder.build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale()));
        } else {
            let pad = 0.05 * (x1 - x0);
            draw!(builder.build_cartesian_2d(x0 - pad..x1 + pad, (y0..y1).log_scale()));
        }
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

fn residual_curves((header, rows): &Table, _title: &str) -> Result<String, PlotError> {
    let series = (1..header.len())
        .map(|c| {
            (
                header[c].clone(),
                rows.iter().map(|r| (r[0], r[c])).collect(),
            )
        })
        .collect();
    log_curves(
        series,
        "Relative residual against basis size",
        "K",
        "relative residual",
        true,
    )
}

/// Columns `set_size, row, epsilon, relative_error`; one curve per set.
fn linearization_curves((_, rows): &Table, _title: &str) -> Result<String, PlotError> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut last_eps = f64::INFINITY;
    for r in rows {
        // A set's rows list ε in the configured order; a rise starts a new set.
        if series.is_empty() || r[2] >= last_eps {
            series.push((format!("|S| = {}", r[0]), Vec::new()));
        }
        last_eps = r[2];
        series.last_mut().expect("pushed").1.push((r[2], r[3]));
    }
    log_curves(
        series,
        "Mixed-difference error against ε",
        "ε",
        "relative error",
        true,
    )
}

/// Columns `x, recovered[, truth][, sensitivity]`; the sensitivity is drawn
/// rescaled to the coefficient range.
fn jet_overlay((header, rows): &Table, title: &str) -> Result<String, PlotError> {
    let col = |name: &str| header.iter().position(|h| h == name);
    let rec = col("recovered").ok_or_else(|| PlotError::Draw("no recovered column".into()))?;
    let truth = col("truth");
    let sens = col("sensitivity");
    let (x0, x1) = finite_range(rows.iter().map(|r| r[0]));
    let (mut y0, mut y1) = finite_range(
        rows.iter()
            .flat_map(|r| std::iter::once(r[rec]).chain(truth.map(|c| r[c]))),
    );
    y0 = y0.min(0.0);
    y1 = y1.max(0.0);
    let pad = 0.08 * (y1 - y0);
    let s_max = sens.map_or(0.0, |c| rows.iter().fold(0.0f64, |m, r| m.max(r[c].abs())));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(
                format!("Recovered coefficient: {title}"),
                ("sans-serif", 18),
            )
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d(x0..x1, y0 - pad..y1 + pad)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc("x")
            .draw()
            .map_err(draw_err)?;
        let mut curve =
            |c: usize, label: &str, color: RGBColor, scale: f64| -> Result<(), PlotError> {
                chart
                    .draw_series(LineSeries::new(
                        rows.iter().map(|r| (r[0], scale * r[c])),
                        color.stroke_width(2),
                    ))
                    .map_err(draw_err)?
                    .label(label)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
                Ok(())
            };
        if let Some(c) = truth {
            curve(c, "truth", BLACK, 1.0)?;
        }
        curve(rec, "recovered", RED, 1.0)?;
        if let Some(c) = sens.filter(|_| s_max > 0.0) {
            curve(
                c,
                "sensitivity (rescaled)",
                RGBColor(120, 120, 220),
                y1 / s_max,
            )?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}
