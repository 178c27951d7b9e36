//! Minimal hand-written SVG: line plots of phase curves and scatter plots
//! of 2D samples. Output is a pure function of the input, so files hash
//! identically across runs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{BayesClassifier, PhaseCurves};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

/// Colours for classes (cycled when K exceeds the palette).
pub const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn axes(&self, out: &mut String) {
        let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
        let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    }
}

fn polyline(out: &mut String, frame: &Frame, xs: &[f64], ys: &[f64], color: &str, name: &str) {
    let pts: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y))).collect();
    let _ = writeln!(
        out,
        r#"<polyline class="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
        pts.join(" ")
    );
}

/// Confidence and instability against step index, with one x tick per step.
pub fn phase_curves_svg(curves: &PhaseCurves) -> Result<String> {
    let n = curves.num_steps();
    if n == 0 {
        return Err(Error::invalid("phase curves are empty"));
    }
    let frame = Frame { x0: 0.0, x1: (n.max(2) - 1) as f64, y0: 0.0, y1: 1.0 };
    let mut out = String::new();
    header(&mut out, "confidence (blue) and instability (red) per sampling step");
    frame.axes(&mut out);
    for k in 0..n {
        let x = frame.px(k as f64);
        let _ = writeln!(
            out,
            r#"<line class="tick" x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#,
            HEIGHT - MARGIN,
            HEIGHT - MARGIN + 5.0
        );
    }
    for v in [0.0, 0.5, 1.0] {
        let y = frame.py(v);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end">{v}</text>"#, MARGIN - 6.0, y + 3.0);
    }
    let steps: Vec<f64> = (0..n).map(|k| k as f64).collect();
    polyline(&mut out, &frame, &steps, &curves.confidence, PALETTE[0], "confidence");
    polyline(&mut out, &frame, &steps[..curves.instability.len()], &curves.instability, PALETTE[1], "instability");
    out.push_str("</svg>\n");
    Ok(out)
}

/// Scatter of 2D points coloured by their Bayes class. One `<g>` group per
/// class, in class order, so the group count equals K.
pub fn scatter_svg(points: &[[f64; 2]], classifier: &BayesClassifier, title: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::invalid("no points to plot"));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let pad = 0.05 * (x1 - x0).max(y1 - y0).max(1e-9);
    let frame = Frame { x0: x0 - pad, x1: x1 + pad, y0: y0 - pad, y1: y1 + pad };
    let k = classifier.num_classes();
    let mut groups = vec![String::new(); k];
    for p in points {
        let c = classifier.classify(*p);
        let _ = writeln!(groups[c], r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, frame.px(p[0]), frame.py(p[1]));
    }
    let mut out = String::new();
    header(&mut out, title);
    frame.axes(&mut out);
    for (c, g) in groups.iter().enumerate() {
        let _ = writeln!(out, r#"<g class="class-{c}" fill="{}" fill-opacity="0.6">"#, PALETTE[c % PALETTE.len()]);
        out.push_str(g);
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}
