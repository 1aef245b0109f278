//! Minimal standalone SVG plots: line charts, histograms and lattice heatmaps.

use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    Histogram,
    Heatmap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlotData {
    Curves(Vec<Curve>),
    Samples(Vec<f64>),
    /// `(x, y, value)` on integer sites.
    Cells(Vec<(i64, i64, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub data: PlotData,
}

#[derive(Debug)]
pub enum PlotError {
    Empty,
    KindMismatch(PlotKind),
    Io(std::io::Error),
}

impl std::fmt::Display for PlotError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlotError::Empty => f.write_str("cannot plot an empty series"),
            PlotError::KindMismatch(k) => write!(f, "series data does not fit a {k:?} plot"),
            PlotError::Io(e) => write!(f, "writing plot: {e}"),
        }
    }
}

impl std::error::Error for PlotError {}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Frame {
        let widen = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn header(s: &Series) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ =
        writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(&s.title));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, esc(&s.x_label));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(&s.y_label)
    );
    out
}

fn axes(out: &mut String, f: &Frame) {
    let (bx, by) = (LEFT, H - BOTTOM);
    let _ = writeln!(out, r#"<line x1="{bx}" y1="{by}" x2="{}" y2="{by}" stroke="black"/>"#, W - RIGHT);
    let _ = writeln!(out, r#"<line x1="{bx}" y1="{by}" x2="{bx}" y2="{TOP}" stroke="black"/>"#);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (f.x0 + t * (f.x1 - f.x0), f.y0 + t * (f.y1 - f.y0));
        let _ =
            writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, f.px(xv), by + 16.0, tick(xv));
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            bx - 6.0,
            f.py(yv) + 4.0,
            tick(yv)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn line_svg(s: &Series, curves: &[Curve]) -> String {
    let pts = curves.iter().flat_map(|c| c.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let f = Frame::new(x0, x1, y0, y1);
    let mut out = header(s);
    axes(&mut out, &f);
    for (k, c) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = c
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        if !c.label.is_empty() {
            let y = TOP + 14.0 * k as f64;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{y}" fill="{colour}" text-anchor="end">{}</text>"#,
                W - RIGHT - 4.0,
                esc(&c.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn histogram_svg(s: &Series, xs: &[f64]) -> String {
    let finite: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = if hi > lo { ((finite.len() as f64).sqrt().ceil() as usize).clamp(1, 50) } else { 1 };
    let mut counts = vec![0usize; bins];
    for &x in &finite {
        let k = if hi > lo { (((x - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
        counts[k.min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0) as f64;
    let f = Frame::new(lo, if hi > lo { hi } else { lo + 1.0 }, 0.0, top.max(1.0));
    let mut out = header(s);
    axes(&mut out, &f);
    let width = (f.px(f.x1) - f.px(f.x0)) / bins as f64;
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let x = f.px(f.x0) + k as f64 * width;
        let y = f.py(c as f64);
        let _ = writeln!(
            out,
            r##"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{width:.2}" height="{:.2}" fill="#4c72b0" stroke="white"/>"##,
            f.py(0.0) - y
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Blue-white-red ramp on `[0, 1]`.
fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (40.0 + 215.0 * u, 70.0 + 185.0 * u, 200.0 + 55.0 * u)
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0 - 35.0 * u, 255.0 - 215.0 * u, 255.0 - 215.0 * u)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn heatmap_svg(s: &Series, cells: &[(i64, i64, f64)]) -> String {
    let (x0, x1) = cells.iter().fold((i64::MAX, i64::MIN), |a, c| (a.0.min(c.0), a.1.max(c.0)));
    let (y0, y1) = cells.iter().fold((i64::MAX, i64::MIN), |a, c| (a.0.min(c.1), a.1.max(c.1)));
    let lo = cells.iter().map(|c| c.2).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|c| c.2).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let f = Frame::new(x0 as f64 - 0.5, x1 as f64 + 0.5, y0 as f64 - 0.5, y1 as f64 + 0.5);
    let mut out = header(s);
    axes(&mut out, &f);
    let cw = f.px(1.0) - f.px(0.0);
    let ch = f.py(0.0) - f.py(1.0);
    for &(x, y, v) in cells {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let _ = writeln!(
            out,
            r#"<rect class="cell" x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="{}"/>"#,
            f.px(x as f64 - 0.5),
            f.py(y as f64 + 0.5),
            ramp(t)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// SVG text for a series; deterministic in its input.
pub fn render(series: &Series, kind: PlotKind) -> Result<String, PlotError> {
    match (&series.data, kind) {
        (PlotData::Curves(c), PlotKind::Line) => {
            if c.is_empty() || c.iter().all(|c| c.points.is_empty()) {
                return Err(PlotError::Empty);
            }
            Ok(line_svg(series, c))
        }
        (PlotData::Samples(xs), PlotKind::Histogram) => {
            if xs.iter().all(|x| !x.is_finite()) {
                return Err(PlotError::Empty);
            }
            Ok(histogram_svg(series, xs))
        }
        (PlotData::Cells(cells), PlotKind::Heatmap) => {
            if cells.is_empty() {
                return Err(PlotError::Empty);
            }
            Ok(heatmap_svg(series, cells))
        }
        _ => Err(PlotError::KindMismatch(kind)),
    }
}

pub fn emit_plot(series: &Series, kind: PlotKind, path: &Path) -> Result<(), PlotError> {
    let svg = render(series, kind)?;
    std::fs::write(path, svg).map_err(PlotError::Io)
}
