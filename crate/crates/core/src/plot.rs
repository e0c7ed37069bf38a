//! Deterministic SVG scatter and line plots, and the point CSV format they
//! are drawn from.
//!
//! Point files have the header `series,x,y`; rows of one series need not be
//! contiguous, and series keep the order of their first appearance.
//! Decision-line files have the header `w0,w1,b` and describe the line
//! `w0 x + w1 y + b = 0`.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
/// Plot-area margins: left, right, top, bottom.
pub const MARGINS: [f64; 4] = [70.0, 150.0, 40.0, 50.0];

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    Scatter,
    Line,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub kind: SeriesKind,
    pub points: Vec<[f64; 2]>,
    /// Palette color when `None`.
    pub color: Option<String>,
}

impl Series {
    pub fn scatter(label: &str, points: &Matrix) -> Self {
        Series {
            label: label.into(),
            kind: SeriesKind::Scatter,
            points: points.iter_rows().map(|r| [r[0], r[1]]).collect(),
            color: None,
        }
    }

    pub fn line(label: &str, points: Vec<[f64; 2]>) -> Self {
        Series {
            label: label.into(),
            kind: SeriesKind::Line,
            points,
            color: None,
        }
    }
}

/// The line `w[0] x + w[1] y + b = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionLine {
    pub w0: f64,
    pub w1: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub lines: Vec<DecisionLine>,
}

fn bounds(spec: &PlotSpec) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in spec.series.iter().flat_map(|s| &s.points) {
        if p[0].is_finite() && p[1].is_finite() {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].max(p[0]);
            b[2] = b[2].min(p[1]);
            b[3] = b[3].max(p[1]);
        }
    }
    if !b[0].is_finite() {
        return [0.0, 1.0, 0.0, 1.0];
    }
    for (lo, hi) in [(0, 1), (2, 3)] {
        let span = b[hi] - b[lo];
        let pad = if span > 0.0 { 0.05 * span } else { 0.5 };
        b[lo] -= pad;
        b[hi] += pad;
    }
    b
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Clips `w0 x + w1 y + b = 0` to the box; `None` when it misses.
fn clip_line(l: &DecisionLine, bx: &[f64; 4]) -> Option<([f64; 2], [f64; 2])> {
    let mut pts: Vec<[f64; 2]> = Vec::new();
    if l.w1 != 0.0 {
        for x in [bx[0], bx[1]] {
            let y = -(l.w0 * x + l.b) / l.w1;
            if y >= bx[2] && y <= bx[3] {
                pts.push([x, y]);
            }
        }
    }
    if l.w0 != 0.0 {
        for y in [bx[2], bx[3]] {
            let x = -(l.w1 * y + l.b) / l.w0;
            if x >= bx[0] && x <= bx[1] {
                pts.push([x, y]);
            }
        }
    }
    let first = *pts.first()?;
    let far = pts
        .iter()
        .copied()
        .max_by(|a, b| {
            let d = |p: &[f64; 2]| (p[0] - first[0]).powi(2) + (p[1] - first[1]).powi(2);
            d(a).total_cmp(&d(b))
        })
        .unwrap_or(first);
    Some((first, far))
}

/// Renders an 800x600 SVG. Identical specs give identical bytes.
pub fn render_svg(spec: &PlotSpec) -> String {
    let [ml, mr, mt, mb] = MARGINS;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let bx = bounds(spec);
    let sx = |x: f64| ml + (x - bx[0]) / (bx[1] - bx[0]) * pw;
    let sy = |y: f64| mt + ph - (y - bx[2]) / (bx[3] - bx[2]) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        escape(&spec.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{ml:.2}" y="{mt:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (bx[0] + f * (bx[1] - bx[0]), bx[2] + f * (bx[3] - bx[2]));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            mt + ph,
            mt + ph + 5.0,
            mt + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{ml:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            ml - 5.0,
            ml - 8.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        HEIGHT - 10.0,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(&spec.y_label)
    );

    for (i, series) in spec.series.iter().enumerate() {
        let color = series.color.clone().unwrap_or_else(|| PALETTE[i % PALETTE.len()].to_string());
        let _ = writeln!(s, r#"<g class="series" data-label="{}">"#, escape(&series.label));
        let finite = series.points.iter().filter(|p| p[0].is_finite() && p[1].is_finite());
        match series.kind {
            SeriesKind::Scatter => {
                for p in finite {
                    let _ = writeln!(
                        s,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#,
                        sx(p[0]),
                        sy(p[1])
                    );
                }
            }
            SeriesKind::Line => {
                let pts: Vec<String> = finite.map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1]))).collect();
                if !pts.is_empty() {
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                        pts.join(" ")
                    );
                }
            }
        }
        let ly = mt + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            ml + pw + 12.0,
            ly - 9.0,
            ml + pw + 28.0,
            ly,
            escape(&series.label)
        );
        let _ = writeln!(s, "</g>");
    }
    for l in &spec.lines {
        if let Some((a, b)) = clip_line(l, &bx) {
            let _ = writeln!(
                s,
                r##"<line class="decision" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#2ca02c" stroke-width="2"/>"##,
                sx(a[0]),
                sy(a[1]),
                sx(b[0]),
                sy(b[1])
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let t = format!("{v:.3}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" { "0".into() } else { t.into() }
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow<'a> {
    series: &'a str,
    x: f64,
    y: f64,
}

/// Writes `series,x,y` rows for each labelled point cloud.
pub fn write_points_csv<W: Write>(out: W, clouds: &[(&str, &Matrix)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if clouds.iter().all(|(_, m)| m.rows() == 0) {
        w.write_record(["series", "x", "y"])?;
    }
    for (name, m) in clouds {
        if m.cols() != 2 {
            return Err(Error::InvalidArgument(format!("point cloud '{name}' is not 2D")));
        }
        for r in m.iter_rows() {
            w.serialize(PointRow { series: name, x: r[0], y: r[1] })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `series,x,y` file into scatter series.
pub fn read_points_csv<R: Read>(input: R) -> Result<Vec<Series>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["series", "x", "y"] {
        return Err(Error::Parse(format!("expected header 'series,x,y', found '{}'", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out: Vec<Series> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parse(format!("row {}: bad number in column {}", line + 2, i + 1)))
        };
        let name = rec.get(0).unwrap_or_default();
        let p = [field(1)?, field(2)?];
        match out.iter_mut().find(|s| s.label == name) {
            Some(s) => s.points.push(p),
            None => out.push(Series {
                label: name.into(),
                kind: SeriesKind::Scatter,
                points: vec![p],
                color: None,
            }),
        }
    }
    Ok(out)
}

pub fn write_line_csv<W: Write>(out: W, lines: &[DecisionLine]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if lines.is_empty() {
        w.write_record(["w0", "w1", "b"])?;
    }
    for l in lines {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_line_csv<R: Read>(input: R) -> Result<Vec<DecisionLine>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["w0", "w1", "b"] {
        return Err(Error::Parse("expected header 'w0,w1,b'".into()));
    }
    r.deserialize().map(|l| l.map_err(Error::from)).collect()
}
