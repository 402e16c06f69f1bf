//! Output writers: JSONL, CSV, binary PGM and standalone SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Scientific notation with 17 significant digits (round-trips any f64).
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON number with 17 significant digits, or `null` when not finite.
pub fn json17(x: f64) -> String {
    if x.is_finite() {
        fmt17(x)
    } else {
        "null".into()
    }
}

pub fn json_opt17(x: Option<f64>) -> String {
    x.map_or_else(|| "null".into(), json17)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One line per entry, newline-terminated.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<String>> {
    records
        .iter()
        .map(|r| serde_json::to_string(r).map_err(Error::from))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_lines(path, &to_jsonl(records)?)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header line plus one line per row.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header
        .iter()
        .map(|h| csv_field(h))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in rows {
        out.push_str(
            &row.iter()
                .map(|f| csv_field(f))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_bytes(path, csv_string(header, rows).as_bytes())
}

/// Binary P5 graymap, one byte per pixel, `round(255 · v)` of values clamped
/// to `[0, 1]`.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape(
            "pgm",
            format!("{} values for {width}x{height}", values.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_bytes(path, &pgm_bytes(width, height, values)?)
}

/// Parse a P5 graymap written by [`pgm_bytes`] back into `[0, 1]` values.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = || Error::InvalidConfig("malformed PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad())?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = bytes.get(pos..pos + w * h).ok_or_else(bad)?;
    Ok((w, h, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesKind {
    Line,
    Scatter,
    /// Points sized and colored by `values`.
    Bubble,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub kind: SeriesKind,
    pub points: Vec<(f64, f64)>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn line(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            kind: SeriesKind::Line,
            points,
            values: Vec::new(),
        }
    }

    pub fn scatter(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            kind: SeriesKind::Scatter,
            points,
            values: Vec::new(),
        }
    }

    pub fn bubble(name: impl Into<String>, points: Vec<(f64, f64)>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            kind: SeriesKind::Bubble,
            points,
            values,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug)]
pub struct PlotSpec {
    pub title: String,
    pub columns: usize,
    pub panel_width: f64,
    pub panel_height: f64,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            title: String::new(),
            columns: 2,
            panel_width: 420.0,
            panel_height: 300.0,
        }
    }
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Render panels on a grid as a standalone SVG 1.1 document. The raw data
/// of every series is embedded in a trailing comment at full precision.
pub fn emit_svg_plot(panels: &[Panel], spec: &PlotSpec) -> Result<String> {
    if panels.is_empty()
        || panels
            .iter()
            .any(|p| p.series.iter().all(|s| s.points.is_empty()))
    {
        return Err(Error::Precondition("plot needs nonempty series".into()));
    }
    let cols = spec.columns.max(1).min(panels.len());
    let rows = panels.len().div_ceil(cols);
    let title_h = if spec.title.is_empty() { 0.0 } else { 30.0 };
    let (pw, ph) = (spec.panel_width, spec.panel_height);
    let width = pw * cols as f64;
    let height = ph * rows as f64 + title_h;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if title_h > 0.0 {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            width / 2.0,
            escape(&spec.title)
        );
    }
    let (ml, mr, mt, mb) = (60.0, 15.0, 30.0, 45.0);
    for (i, panel) in panels.iter().enumerate() {
        let ox = (i % cols) as f64 * pw;
        let oy = (i / cols) as f64 * ph + title_h;
        let (x0, y0) = (ox + ml, oy + mt);
        let (w, h) = (pw - ml - mr, ph - mt - mb);
        let (xlo, xhi) = bounds(
            panel
                .series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.0)),
        );
        let (ylo, yhi) = bounds(
            panel
                .series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1)),
        );
        let sx = |x: f64| x0 + (x - xlo) / (xhi - xlo) * w;
        let sy = |y: f64| y0 + h - (y - ylo) / (yhi - ylo) * h;
        let _ = writeln!(svg, r#"<g class="panel" id="panel-{i}">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            x0 + w / 2.0,
            oy + 18.0,
            escape(&panel.title)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
        );
        for t in 0..=4 {
            let fx = xlo + (xhi - xlo) * t as f64 / 4.0;
            let fy = ylo + (yhi - ylo) * t as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{:.3}</text>"#,
                sx(fx),
                y0 + h + 12.0,
                fx
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="9">{:.3e}</text>"#,
                x0 - 4.0,
                sy(fy) + 3.0,
                fy
            );
        }
        let _ = writeln!(
            svg,
            r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + w / 2.0,
            y0 + h + 30.0,
            escape(&panel.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text class="y-label" x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
            ox + 14.0,
            y0 + h / 2.0,
            ox + 14.0,
            y0 + h / 2.0,
            escape(&panel.y_label)
        );
        let (vlo, vhi) = bounds(panel.series.iter().flat_map(|s| s.values.iter().copied()));
        for (k, s) in panel.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            match s.kind {
                SeriesKind::Line if s.points.len() > 1 => {
                    let pts: Vec<String> = s
                        .points
                        .iter()
                        .filter(|p| p.0.is_finite() && p.1.is_finite())
                        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                        .collect();
                    let _ = writeln!(
                        svg,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                        pts.join(" ")
                    );
                }
                SeriesKind::Line | SeriesKind::Scatter => {
                    for &(x, y) in s
                        .points
                        .iter()
                        .filter(|p| p.0.is_finite() && p.1.is_finite())
                    {
                        let _ = writeln!(
                            svg,
                            r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
                SeriesKind::Bubble => {
                    let vmax = vlo.abs().max(vhi.abs()).max(1e-300);
                    for (j, &(x, y)) in s.points.iter().enumerate() {
                        let v = s.values.get(j).copied().unwrap_or(0.0);
                        let r = 4.0 + 14.0 * (v.abs() / vmax);
                        let fill = if v >= 0.0 { "#2ca02c" } else { "#d62728" };
                        let _ = writeln!(
                            svg,
                            r#"<circle class="bubble" cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="{fill}" fill-opacity="0.6" stroke="black"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
            }
            let _ = writeln!(
                svg,
                r#"<text class="legend" x="{}" y="{}" fill="{color}">{}</text>"#,
                x0 + w - 110.0,
                y0 + 12.0 + 12.0 * k as f64,
                escape(&s.name)
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    let _ = writeln!(svg, "<!-- data");
    for (i, panel) in panels.iter().enumerate() {
        for s in &panel.series {
            let _ = write!(svg, "panel {i} series {}:", s.name.replace("--", "- -"));
            for (j, &(x, y)) in s.points.iter().enumerate() {
                let _ = write!(svg, " {},{}", fmt17(x), fmt17(y));
                if let Some(v) = s.values.get(j) {
                    let _ = write!(svg, ",{}", fmt17(*v));
                }
            }
            svg.push('\n');
        }
    }
    let _ = writeln!(svg, "-->");
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt17_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(json17(f64::NAN), "null");
    }

    #[test]
    fn csv_rows_plus_header() {
        let rows = vec![vec!["1".into(), "a,b".into()], vec!["2".into(), "c".into()]];
        let s = csv_string(&["n", "s"], &rows);
        assert_eq!(s.lines().count(), rows.len() + 1);
        assert!(s.contains("\"a,b\""));
    }

    #[test]
    fn pgm_round_trip() {
        let vals = vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.25];
        let bytes = pgm_bytes(3, 2, &vals).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, back) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back[1], 128.0 / 255.0);
        assert_eq!(back[3], 1.0);
        assert_eq!(back[4], 0.0);
        assert!(pgm_bytes(2, 2, &vals).is_err());
    }

    #[test]
    fn empty_series_rejected() {
        let p = Panel {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series::line("a", vec![])],
        };
        assert!(emit_svg_plot(&[p], &PlotSpec::default()).is_err());
        assert!(emit_svg_plot(&[], &PlotSpec::default()).is_err());
    }

    #[test]
    fn single_point_has_one_marker() {
        let p = Panel {
            title: "t".into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            series: vec![Series::line("a", vec![(1.0, 2.0)])],
        };
        let svg = emit_svg_plot(&[p], &PlotSpec::default()).unwrap();
        assert_eq!(svg.matches(r#"class="marker""#).count(), 1);
        assert!(svg.contains("1.0000000000000000e0,2.0000000000000000e0"));
    }
}
