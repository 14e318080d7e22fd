//! SVG report of a run directory: top-view trajectory, position error and
//! yaw error with their 3σ envelopes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::output::{NumericTable, ERRORS_FILE, ESTIMATE_FILE};

const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 340.0;
const MARGIN: f64 = 60.0;

struct Series {
    points: Vec<(f64, f64)>,
    color: &'static str,
    dash: bool,
    label: &'static str,
}

/// Round tick spacing covering `span` with about `target` intervals.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = (span / target).max(f64::MIN_POSITIVE);
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    mag * if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    }
}

fn bounds(series: &[Series], equal: bool) -> Option<(f64, f64, f64, f64)> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return None;
    }
    let pad = |a: f64, b: f64| if b - a > 0.0 { 0.05 * (b - a) } else { 0.5 * a.abs().max(1.0) };
    let (px, py) = (pad(x0, x1), pad(y0, y1));
    let (mut x0, mut x1, mut y0, mut y1) = (x0 - px, x1 + px, y0 - py, y1 + py);
    if equal {
        // same metres per pixel on both axes
        let s = ((x1 - x0) / PANEL_W).max((y1 - y0) / PANEL_H);
        let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        (x0, x1, y0, y1) = (cx - 0.5 * s * PANEL_W, cx + 0.5 * s * PANEL_W, cy - 0.5 * s * PANEL_H, cy + 0.5 * s * PANEL_H);
    }
    Some((x0, x1, y0, y1))
}

fn panel(svg: &mut String, ox: f64, title: &str, xlabel: &str, ylabel: &str, series: &[Series], equal: bool) {
    let oy = 40.0;
    let _ = writeln!(svg, r#"<g transform="translate({ox},{oy})">"#);
    let _ = writeln!(svg, r#"<text x="{}" y="-12" text-anchor="middle" font-size="15">{title}</text>"#, PANEL_W / 2.0);
    let _ = writeln!(svg, r##"<rect width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#333"/>"##);
    let Some((x0, x1, y0, y1)) = bounds(series, equal) else {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">no data</text></g>"#, PANEL_W / 2.0, PANEL_H / 2.0);
        return;
    };
    let sx = |x: f64| (x - x0) / (x1 - x0) * PANEL_W;
    let sy = |y: f64| PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
    for (lo, hi, vertical) in [(x0, x1, true), (y0, y1, false)] {
        let step = tick_step(hi - lo, 6.0);
        let mut v = (lo / step).ceil() * step;
        while v <= hi {
            let label = if step >= 1.0 { format!("{v:.0}") } else { format!("{v:.*}", (-step.log10().floor()) as usize) };
            if vertical {
                let x = sx(v);
                let _ = writeln!(svg, r##"<line x1="{x:.1}" y1="0" x2="{x:.1}" y2="{PANEL_H}" stroke="#ddd"/><text x="{x:.1}" y="{}" text-anchor="middle" font-size="11">{label}</text>"##, PANEL_H + 15.0);
            } else {
                let y = sy(v);
                let _ = writeln!(svg, r##"<line x1="0" y1="{y:.1}" x2="{PANEL_W}" y2="{y:.1}" stroke="#ddd"/><text x="-6" y="{:.1}" text-anchor="end" font-size="11">{label}</text>"##, y + 4.0);
            }
            v += step;
        }
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{xlabel}</text>"#, PANEL_W / 2.0, PANEL_H + 34.0);
    let _ = writeln!(svg, r#"<text transform="translate(-46,{}) rotate(-90)" text-anchor="middle" font-size="12">{ylabel}</text>"#, PANEL_H / 2.0);
    for (k, s) in series.iter().enumerate() {
        let mut pts = String::new();
        for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let dash = if s.dash { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#, pts.trim_end(), s.color);
        let ly = 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"{dash}/><text x="{}" y="{}" font-size="11">{}</text>"#,
            PANEL_W - 130.0,
            PANEL_W - 105.0,
            s.color,
            PANEL_W - 100.0,
            ly + 4.0,
            s.label
        );
    }
    let _ = writeln!(svg, "</g>");
}

fn column(t: &NumericTable, name: &str) -> Result<Vec<f64>> {
    t.column(name).ok_or_else(|| Error::dataset(name, "missing column"))
}

/// Render the run in `run_dir` to an SVG document.
pub fn render(run_dir: &Path) -> Result<String> {
    let est = NumericTable::read(&run_dir.join(ESTIMATE_FILE), "estimate")?;
    let errors_path = run_dir.join(ERRORS_FILE);
    let err = if errors_path.exists() { Some(NumericTable::read(&errors_path, "errors")?) } else { None };

    let (t, px, py) = (column(&est, "t_s")?, column(&est, "px")?, column(&est, "py")?);
    let mut traj = vec![Series { points: px.iter().copied().zip(py.iter().copied()).collect(), color: "#1f77b4", dash: false, label: "estimate" }];
    let var: Vec<f64> = {
        let (a, b, c) = (column(&est, "var_px")?, column(&est, "var_py")?, column(&est, "var_pz")?);
        a.iter().zip(&b).zip(&c).map(|((a, b), c)| a + b + c).collect()
    };
    let sigma_pos: Vec<(f64, f64)> = t.iter().zip(&var).map(|(t, v)| (*t, 3.0 * v.sqrt())).collect();
    let sigma_yaw: Vec<f64> = column(&est, "var_rz")?.iter().map(|v| 3.0 * v.sqrt()).collect();

    let mut pos = Vec::new();
    let mut yaw = Vec::new();
    if let Some(err) = &err {
        // truth = estimate + error, matched on time
        let (et, ex, ey) = (column(err, "t_s")?, column(err, "ex")?, column(err, "ey")?);
        let index: std::collections::HashMap<u64, usize> = t.iter().enumerate().map(|(i, t)| (t.to_bits(), i)).collect();
        let truth: Vec<(f64, f64)> = et.iter().zip(ex.iter().zip(&ey)).filter_map(|(t, (x, y))| index.get(&t.to_bits()).map(|&i| (px[i] + x, py[i] + y))).collect();
        traj.push(Series { points: truth, color: "#d62728", dash: true, label: "truth" });
        pos.push(Series { points: et.iter().copied().zip(column(err, "position_error_m")?).collect(), color: "#1f77b4", dash: false, label: "|error|" });
        yaw.push(Series { points: et.iter().copied().zip(column(err, "yaw_error_rad")?.iter().map(|y| y.to_degrees())).collect(), color: "#1f77b4", dash: false, label: "error" });
    }
    pos.push(Series { points: sigma_pos, color: "#7f7f7f", dash: true, label: "3σ" });
    yaw.push(Series { points: t.iter().copied().zip(sigma_yaw.iter().map(|s| s.to_degrees())).collect(), color: "#7f7f7f", dash: true, label: "+3σ" });
    yaw.push(Series { points: t.iter().copied().zip(sigma_yaw.iter().map(|s| -s.to_degrees())).collect(), color: "#7f7f7f", dash: true, label: "−3σ" });

    let width = 3.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 100.0;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut svg, MARGIN, "Trajectory (top view)", "x [m]", "y [m]", &traj, true);
    panel(&mut svg, 2.0 * MARGIN + PANEL_W, "Position error", "t [s]", "[m]", &pos, false);
    panel(&mut svg, 3.0 * MARGIN + 2.0 * PANEL_W, "Yaw error", "t [s]", "[deg]", &yaw, false);
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

pub fn write_plot(run_dir: &Path, out: &Path) -> Result<()> {
    let svg = render(run_dir)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    std::fs::write(out, svg).map_err(Error::io(out))
}
