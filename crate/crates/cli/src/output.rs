//! Artifact writers: observation CSV, the JSON report bundle and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use kfp_core::solver::{Grid, Observation};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

/// Shortest round-trip decimal, scientific for very small or large magnitudes.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn observations_csv(entries: &[Observation]) -> String {
    let mut s = String::from("t,observable,value\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{}", fmt_f64(e.t), e.observable, fmt_f64(e.value));
    }
    s
}

/// `sha256:` of the grid's extents and cell counts, floats by bit pattern.
pub fn grid_hash(g: &Grid) -> String {
    let mut h = Sha256::new();
    h.update(g.lx.to_bits().to_le_bytes());
    h.update(g.lv.to_bits().to_le_bytes());
    h.update((g.nx as u64).to_le_bytes());
    h.update((g.nv as u64).to_le_bytes());
    let digest = h.finalize();
    let mut out = String::from("sha256:");
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Per-module sections merged last-writer-wins.
#[derive(Debug, Default)]
pub struct Bundle {
    sections: Map<String, Value>,
    warnings: Vec<String>,
}

impl Bundle {
    pub fn insert(&mut self, name: &str, section: Value) {
        if self.sections.insert(name.to_string(), section).is_some() {
            self.warnings.push(format!("section `{name}` appeared more than once; the last one was kept"));
        }
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    pub fn finish(self, config: Value, provenance: Value, status: &str, error: Option<Value>) -> Value {
        json!({
            "status": status,
            "error": error,
            "config": config,
            "provenance": provenance,
            "sections": Value::Object(self.sections),
            "warnings": self.warnings,
        })
    }
}

pub fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("report values serialize");
    text.push('\n');
    std::fs::write(path, text)
}

/// Log-linear line chart of one or more `(t, value)` series; nonpositive
/// values are skipped.
pub fn decay_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 56.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, s)| s.iter().filter(|p| p.1 > 0.0).map(|&(t, v)| (t, v.log10())))
        .collect();
    let (mut t0, mut t1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(t, y) in &pts {
        t0 = t0.min(t);
        t1 = t1.max(t);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (t0, t1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if t1 <= t0 {
        t1 = t0 + 1.0;
    }
    let (y0, y1) = (y0.floor(), if y1.ceil() > y0.floor() { y1.ceil() } else { y0.floor() + 1.0 });
    let sx = |t: f64| PAD + (t - t0) / (t1 - t0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, "<!-- kfp {} -->", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for k in (y0 as i64)..=(y1 as i64) {
        let y = sy(k as f64);
        let _ = writeln!(s, r##"<line x1="{}" y1="{y:.2}" x2="{PAD}" y2="{y:.2}" stroke="black"/>"##, PAD - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">1e{k}</text>"#, PAD - 6.0, y + 4.0);
    }
    for k in 0..=4 {
        let t = t0 + (t1 - t0) * k as f64 / 4.0;
        let x = sx(t);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, H - PAD + 16.0, fmt_tick(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">t</text>"#, W / 2.0, H - 12.0);
    for (n, (name, data)) in series.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let d: Vec<String> = data
            .iter()
            .filter(|p| p.1 > 0.0)
            .map(|&(t, v)| format!("{:.2},{:.2}", sx(t), sy(v.log10())))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        }
        let ly = PAD + 16.0 * n as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}" text-anchor="end">{}</text>"#, W - PAD, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(t: f64) -> String {
    let s = format!("{t:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
