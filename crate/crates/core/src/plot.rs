//! Minimal SVG charts for the study outputs.

use std::fmt::Write;

use crate::evaluation::Aggregate;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

#[derive(Debug, Clone)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub width: f64,
    pub label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Marker {
    pub x: f64,
    pub color: &'static str,
    pub label: String,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let (y0, y1) = if y1 > y0 { (y0, y1) } else { (y0 - 0.5, y0 + 0.5) };
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x0 + 0.5) };
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y.clamp(self.y0, self.y1) - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = write!(
            out,
            r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = write!(
            out,
            r##"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"##,
            W / 2.0,
            escape(title)
        );
        let _ = write!(
            out,
            r##"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"##,
            W / 2.0,
            H - 12.0,
            escape(xlabel)
        );
        let _ = write!(
            out,
            r##"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"##,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let y = self.y0 + f * (self.y1 - self.y0);
            let _ = write!(
                out,
                r##"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
                PAD - 4.0,
                self.py(y) + 3.0,
                tick(y)
            );
            let x = self.x0 + f * (self.x1 - self.x0);
            let _ = write!(
                out,
                r##"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{}</text>"##,
                self.px(x),
                H - PAD + 14.0,
                tick(x)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header() -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
    )
}

/// Line chart with vertical markers; non-finite points break the line.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], markers: &[Marker]) -> String {
    let finite = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let frame = Frame::new(x0, x1, y0, y1);
    let mut out = header();
    frame.axes(&mut out, title, xlabel, ylabel);
    for s in series {
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, frame.px(x), frame.py(y));
            pen_down = true;
        }
        let _ = write!(
            out,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="{}"/>"#,
            d.trim_end(),
            s.color,
            s.width
        );
    }
    let mut legend_y = PAD + 14.0;
    for s in series.iter().filter(|s| s.label.is_some()) {
        let _ = write!(
            out,
            r#"<text x="{}" y="{legend_y}" font-size="11" fill="{}">{}</text>"#,
            W - PAD - 6.0,
            s.color,
            escape(s.label.as_deref().unwrap_or_default())
        );
        legend_y += 14.0;
    }
    for m in markers {
        let x = frame.px(m.x.clamp(frame.x0, frame.x1));
        let _ = write!(
            out,
            r#"<line x1="{x:.2}" y1="{PAD}" x2="{x:.2}" y2="{}" stroke="{}" stroke-dasharray="4 3"/>"#,
            H - PAD,
            m.color
        );
        let _ = write!(
            out,
            r#"<text x="{:.2}" y="{legend_y}" font-size="11" fill="{}">{}</text>"#,
            x + 3.0,
            m.color,
            escape(&m.label)
        );
        legend_y += 14.0;
    }
    out.push_str("</svg>\n");
    out
}

/// Box plot, one box per aggregate; `-inf` values are drawn at the axis floor.
pub fn box_plot(title: &str, ylabel: &str, boxes: &[(String, Aggregate)]) -> String {
    let fin = |v: f64| v.is_finite().then_some(v);
    let vals: Vec<f64> = boxes
        .iter()
        .flat_map(|(_, a)| {
            [a.whisker_low, a.whisker_high, a.q1, a.q3]
                .into_iter()
                .chain(a.outliers.iter().copied())
        })
        .filter_map(fin)
        .collect();
    let y0 = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let y1 = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if y0.is_finite() { (y0, y1) } else { (0.0, 1.0) };
    let frame = Frame::new(0.0, boxes.len().max(1) as f64, y0, y1);
    let mut out = header();
    frame.axes(&mut out, title, "", ylabel);
    let slot = (W - 2.0 * PAD) / boxes.len().max(1) as f64;
    for (i, (label, a)) in boxes.iter().enumerate() {
        let cx = PAD + (i as f64 + 0.5) * slot;
        let half = slot * 0.25;
        let (yl, yh) = (frame.py(a.whisker_low), frame.py(a.whisker_high));
        let (q1, q3, med) = (frame.py(a.q1), frame.py(a.q3), frame.py(a.median));
        let _ = write!(
            out,
            r##"<line x1="{cx:.2}" y1="{yl:.2}" x2="{cx:.2}" y2="{yh:.2}" stroke="#333"/>"##
        );
        for y in [yl, yh] {
            let _ = write!(
                out,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#333"/>"##,
                cx - half / 2.0,
                cx + half / 2.0
            );
        }
        let _ = write!(
            out,
            r##"<rect x="{:.2}" y="{q3:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="#333"/>"##,
            cx - half,
            2.0 * half,
            (q1 - q3).max(0.5)
        );
        let _ = write!(
            out,
            r##"<line x1="{:.2}" y1="{med:.2}" x2="{:.2}" y2="{med:.2}" stroke="#c00" stroke-width="2"/>"##,
            cx - half,
            cx + half
        );
        for &o in &a.outliers {
            let _ = write!(
                out,
                r##"<circle cx="{cx:.2}" cy="{:.2}" r="2.5" fill="none" stroke="#c00"/>"##,
                frame.py(o)
            );
        }
        let _ = write!(
            out,
            r#"<text x="{cx:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            H - PAD + 28.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
