//! SVG line charts from `metrics.jsonl` files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A named series of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// What to extract from a metrics file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Loss,
    /// Mean effective rank over factorized layers.
    Rank,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "accuracy" => Some(Metric::Accuracy),
            "loss" => Some(Metric::Loss),
            "rank" => Some(Metric::Rank),
            _ => None,
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Accuracy => "test accuracy",
            Metric::Loss => "test loss",
            Metric::Rank => "mean effective rank",
        }
    }
}

/// Reads one series from a metrics file; the initial record is round 0 and
/// round `t` records land at `t + 1`.
pub fn read_series(path: &Path, metric: Metric, label: &str) -> Result<Series> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut offset = 0u64;
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).map_err(|e| Error::Format {
            offset,
            message: format!("bad metrics line: {e}"),
        })?;
        offset += l.len() as u64 + 1;
        let family = v["family"].as_str().unwrap_or("");
        let x = match family {
            "init" => 0.0,
            _ => v["round"].as_f64().map_or(f64::NAN, |r| r + 1.0),
        };
        let y = match (metric, family) {
            (Metric::Accuracy, "init" | "eval") => v["accuracy"].as_f64(),
            (Metric::Loss, "init" | "eval") => v["loss"].as_f64(),
            (Metric::Rank, "init" | "rank") => v["layers"].as_object().and_then(|m| {
                let vals: Vec<f64> = m.values().filter_map(|x| x.as_f64()).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            }),
            _ => None,
        };
        if let Some(y) = y {
            points.push((x, y));
        }
    }
    Ok(Series {
        label: label.to_string(),
        points,
    })
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn render_svg(series: &[Series], metric: Metric) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(o, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        o,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(
        o,
        r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
        w / 2.0,
        metric.title()
    );
    let _ = writeln!(
        o,
        r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#,
        w / 2.0,
        h - 12.0
    );
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            o,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#,
            m - 4.0,
            sy(y) + 4.0
        );
        let x = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.0}</text>"#,
            sx(x),
            h - m + 16.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            o,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            o,
            r#"<text x="{}" y="{ly}" fill="{c}">{}</text>"#,
            w - m - 150.0,
            escape(&s.label)
        );
    }
    o.push_str("</svg>\n");
    o
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
