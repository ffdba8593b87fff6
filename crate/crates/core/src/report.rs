//! Run summaries: `runs.csv` and a time-versus-accuracy `scatter.svg`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of `runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// SSL method, or `random` / `supervised` for non-SSL baselines.
    pub method: String,
    /// Pretraining plan in `R:E,...` form; empty without pretraining.
    pub plan: String,
    /// Plan-weighted mean MACs per image.
    pub macs: f64,
    /// Pretraining plus warmup plus fine-tuning.
    pub wall_seconds: f64,
    pub acc_normal: Option<f64>,
    pub acc_mixup: Option<f64>,
}

impl RunReport {
    fn accuracy(&self) -> Option<f64> {
        self.acc_normal.or(self.acc_mixup)
    }
}

pub const RUNS_HEADER: [&str; 6] = ["method", "plan", "macs", "wall_seconds", "acc_normal", "acc_mixup"];

pub fn write_runs_csv(runs: &[RunReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in runs {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 55.0;

fn color(method: &str) -> &'static str {
    match method {
        "moco" => "#1f77b4",
        "simclr" => "#d62728",
        "byol" => "#2ca02c",
        "random" => "#7f7f7f",
        _ => "#9467bd",
    }
}

fn marker(method: &str, x: f64, y: f64, class: &str, title: &str) -> String {
    let c = color(method);
    let t = if title.is_empty() {
        String::new()
    } else {
        format!("<title>{}</title>", escape(title))
    };
    match method {
        "moco" => format!(r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="5" fill="{c}">{t}</circle>"#),
        "simclr" => format!(
            r#"<rect class="{class}" x="{:.2}" y="{:.2}" width="9" height="9" fill="{c}">{t}</rect>"#,
            x - 4.5,
            y - 4.5
        ),
        "byol" => format!(
            r#"<polygon class="{class}" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{c}">{t}</polygon>"#,
            x,
            y - 6.0,
            x - 5.5,
            y + 4.0,
            x + 5.5,
            y + 4.0
        ),
        _ => format!(
            r#"<polygon class="{class}" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{c}">{t}</polygon>"#,
            x,
            y - 6.0,
            x + 6.0,
            y,
            x,
            y + 6.0,
            x - 6.0,
            y
        ),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Axis range padded by 5% (or ±1 around a single value).
fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0f64.max(hi.abs() * 0.05) };
    (lo - pad, hi + pad)
}

/// Standalone SVG of wall time (x) against accuracy (y), one marker per run
/// that has an accuracy.
pub fn scatter_svg(runs: &[RunReport]) -> String {
    let pts: Vec<&RunReport> = runs.iter().filter(|r| r.accuracy().is_some()).collect();
    let (x0, x1) = range(pts.iter().map(|r| r.wall_seconds));
    let (y0, y1) = range(pts.iter().map(|r| 100.0 * r.accuracy().unwrap_or(0.0)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| TOP + ph - (v - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.1}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.1}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">wall time (s)</text>"#,
        LEFT + pw / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy (%)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for r in &pts {
        let acc = 100.0 * r.accuracy().unwrap_or(0.0);
        let title = format!("{} {} {:.1}%", r.method, r.plan, acc);
        let _ = writeln!(s, "{}", marker(&r.method, sx(r.wall_seconds), sy(acc), "marker", &title));
    }
    let mut methods: Vec<&str> = pts.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    for (i, m) in methods.iter().enumerate() {
        let y = TOP + 12.0 + 20.0 * i as f64;
        let x = W - RIGHT + 20.0;
        let _ = writeln!(
            s,
            r#"{}<text x="{:.2}" y="{:.2}">{}</text>"#,
            marker(m, x, y, "legend", ""),
            x + 12.0,
            y + 4.0,
            escape(m)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `runs.csv` and `scatter.svg` into `out`.
pub fn emit_report(runs: &[RunReport], out: &Path) -> Result<(PathBuf, PathBuf)> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to report"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join("runs.csv");
    write_runs_csv(runs, &csv)?;
    let svg = out.join("scatter.svg");
    std::fs::write(&svg, scatter_svg(runs)).map_err(|e| Error::io(&svg, e))?;
    Ok((csv, svg))
}
