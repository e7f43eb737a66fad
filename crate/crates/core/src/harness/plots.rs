//! Static SVG plots of closed-loop logs and Nyquist curves.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::mpc::TrajectoryLog;

/// Floor of log-scale error axes.
pub const LOG_FLOOR: f64 = 1e-12;

const PALETTE: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Line plot of several series; with `log_y` values are clamped to
/// [`LOG_FLOOR`] first.
pub fn line_plot(path: &Path, title: &str, y_label: &str, series: &[Series], log_y: bool) -> Result<()> {
    let root = SVGBackend::new(path, (900, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = || series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root);
    chart.caption(title, ("sans-serif", 20)).margin(10).x_label_area_size(35).y_label_area_size(70);
    if log_y {
        let hi = ys().fold(LOG_FLOOR, f64::max) * 2.0;
        let mut c = chart.build_cartesian_2d(x0..x1, (LOG_FLOOR..hi).log_scale()).map_err(plot_err)?;
        c.configure_mesh().x_desc("t [s]").y_desc(y_label).draw().map_err(plot_err)?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts = s.points.iter().map(|&(x, y)| (x, y.abs().max(LOG_FLOOR)));
            c.draw_series(LineSeries::new(pts, color)).map_err(plot_err)?.label(&s.label).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        c.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    } else {
        let (y0, y1) = range(ys());
        let mut c = chart.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_err)?;
        c.configure_mesh().x_desc("t [s]").y_desc(y_label).draw().map_err(plot_err)?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let style = if s.dashed { color.mix(0.6).stroke_width(1) } else { color.stroke_width(2) };
            c.draw_series(LineSeries::new(s.points.iter().copied(), style)).map_err(plot_err)?.label(&s.label).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        c.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Nyquist curve (and its mirror) with the unit circle, the critical point
/// and optional labelled markers.
pub fn nyquist_plot(path: &Path, curve: &[(f64, f64, f64)], markers: &[(String, f64, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    // Near the integrator pole the curve leaves any useful window; clip to it.
    let lim = 4.0;
    let mut c = ChartBuilder::on(&root)
        .caption("Nyquist", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(-lim..lim, -lim..lim)
        .map_err(plot_err)?;
    c.configure_mesh().x_desc("Re").y_desc("Im").draw().map_err(plot_err)?;
    let circle = (0..=360).map(|d| {
        let a = (d as f64).to_radians();
        (a.cos(), a.sin())
    });
    c.draw_series(LineSeries::new(circle, BLACK.mix(0.4))).map_err(plot_err)?;
    let inside = |re: f64, im: f64| re.abs() <= lim && im.abs() <= lim;
    let upper: Vec<(f64, f64)> = curve.iter().filter(|p| inside(p.1, p.2)).map(|p| (p.1, p.2)).collect();
    let lower: Vec<(f64, f64)> = upper.iter().map(|&(re, im)| (re, -im)).collect();
    c.draw_series(LineSeries::new(upper, BLUE.stroke_width(2))).map_err(plot_err)?;
    c.draw_series(LineSeries::new(lower, BLUE.mix(0.4))).map_err(plot_err)?;
    c.draw_series(std::iter::once(Cross::new((-1.0, 0.0), 6, RED.stroke_width(2)))).map_err(plot_err)?;
    for (label, re, im) in markers {
        if inside(*re, *im) {
            c.draw_series(std::iter::once(Circle::new((*re, *im), 4, GREEN.filled()))).map_err(plot_err)?;
            c.draw_series(std::iter::once(Text::new(label.clone(), (*re + 0.08, *im), ("sans-serif", 14)))).map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// States with references, log-scale errors, inputs, gains and (MSD)
/// margins into `dir`. Returns notes about omitted plots.
pub fn emit_plots(dir: &Path, log: &TrajectoryLog) -> Result<Vec<String>> {
    let mut notes = Vec::new();
    if log.steps.is_empty() {
        return Err(Error::Config("cannot plot an empty log".into()));
    }
    let (times, states) = log.true_series();
    let mut st = Vec::new();
    for i in 0..log.n {
        st.push(Series { label: format!("x{}", i + 1), points: times.iter().zip(&states).map(|(t, x)| (*t, x[i])).collect(), dashed: false });
    }
    for i in 0..log.n / 2 {
        st.push(Series { label: format!("ref x{}", i + 1), points: log.steps.iter().map(|s| (s.t, s.x_ref[i])).collect(), dashed: true });
    }
    line_plot(&dir.join("states.svg"), "states", "x", &st, false)?;

    let err: Vec<Series> = (0..log.n / 2)
        .map(|i| Series { label: format!("|e{}|", i + 1), points: log.steps.iter().map(|s| (s.t, s.x_ref[i] - s.x_true[i])).collect(), dashed: false })
        .collect();
    line_plot(&dir.join("errors.svg"), "tracking error", "|e|", &err, true)?;

    let inputs: Vec<Series> =
        (0..log.m).map(|i| Series { label: format!("u{}", i + 1), points: log.steps.iter().map(|s| (s.t, s.u[i])).collect(), dashed: false }).collect();
    line_plot(&dir.join("inputs.svg"), "inputs", "u", &inputs, false)?;

    let p = log.steps[0].theta.len();
    if p == 0 {
        notes.push("gains plot omitted: empty gain series".to_string());
    } else {
        let gains: Vec<Series> = (0..p)
            .map(|i| Series { label: format!("gain{}", i + 1), points: log.steps.iter().map(|s| (s.t, s.theta[i])).collect(), dashed: false })
            .collect();
        line_plot(&dir.join("gains.svg"), "gains", "gain", &gains, false)?;
    }

    let margins: Vec<(f64, f64)> = log.steps.iter().filter_map(|s| s.margin.map(|m| (s.t, m))).collect();
    if !margins.is_empty() {
        line_plot(&dir.join("margin.svg"), "stability margin", "margin", &[Series { label: "margin".into(), points: margins, dashed: false }], false)?;
    }
    Ok(notes)
}
