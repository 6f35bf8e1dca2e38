//! SVG scatter of mean latency against mR@50.

use std::fmt::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub label: String,
    pub latency_ms: f64,
    pub mr50: f64,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Axis range padded by 10% with a non-zero span.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { hi.abs().max(1.0) };
    ((lo - 0.1 * span).max(0.0), hi + 0.1 * span)
}

pub fn scatter_svg(points: &[PlotPoint], title: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    if let Some(p) = points.iter().find(|p| !p.latency_ms.is_finite() || !p.mr50.is_finite()) {
        return Err(Error::NonFinite(format!("plot point `{}`", p.label)));
    }
    let (x0, x1) = range(points.iter().map(|p| p.latency_ms));
    let (y0, y1) = range(points.iter().map(|p| p.mr50));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16" font-family="sans-serif">{}</text>"#, W / 2.0, escape(title));
    let (left, bottom, right, top) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}" stroke="black"/>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11" font-family="sans-serif">{xv:.2}</text>"#, px(xv), bottom + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11" font-family="sans-serif">{yv:.1}</text>"#, left - 6.0, py(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13" font-family="sans-serif">latency (ms)</text>"#, W / 2.0, H - 18.0);
    let _ = writeln!(s, r#"<text x="18" y="{}" text-anchor="middle" font-size="13" font-family="sans-serif" transform="rotate(-90 18 {})">mR@50</text>"#, H / 2.0, H / 2.0);
    for p in points {
        let (cx, cy) = (px(p.latency_ms), py(p.mr50));
        let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="5" fill="steelblue"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" font-family="sans-serif">{}</text>"#, cx + 8.0, cy - 6.0, escape(&p.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
