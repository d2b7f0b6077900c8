//! Minimal static SVG charts.

use std::fmt::Write;

use combo_core::baselines::LayerCurve;
use combo_core::training::{ImportanceReport, TrainReport};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    svg: String,
    y_max: f64,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, y_max: f64) -> Self {
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = write!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
        let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD);
        let _ = write!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
        let _ = write!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        for i in 0..=4 {
            let v = y_max * i as f64 / 4.0;
            let y = y0 - (y0 - y1) * i as f64 / 4.0;
            let _ = write!(svg, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
            let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
        }
        let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 14.0, escape(x_label));
        let _ = write!(
            svg,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        Frame { svg, y_max }
    }

    fn x(&self, i: usize, n: usize) -> f64 {
        let span = W - PAD / 2.0 - PAD;
        if n <= 1 {
            PAD + span / 2.0
        } else {
            PAD + span * i as f64 / (n - 1) as f64
        }
    }

    fn y(&self, v: f64) -> f64 {
        let t = if self.y_max > 0.0 { (v / self.y_max).clamp(0.0, 1.0) } else { 0.0 };
        H - PAD - (H - 1.5 * PAD) * t
    }

    fn x_tick(&mut self, x: f64, label: &str) {
        let _ = write!(self.svg, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, escape(label));
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn polyline(frame: &mut Frame, values: &[f64], colour: &str) {
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.2},{:.2}", frame.x(i, values.len()), frame.y(v)))
        .collect();
    let _ = write!(
        frame.svg,
        r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
        pts.join(" ")
    );
    for p in &pts {
        let (x, y) = p.split_once(',').expect("pair");
        let _ = write!(frame.svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>"#);
    }
}

/// Validation accuracy against probed layer.
pub fn layer_curve(curve: &LayerCurve) -> String {
    let mut f = Frame::new(
        &format!("Linear probe accuracy by layer: {}", curve.backbone_id),
        "layer",
        "validation accuracy",
        1.0,
    );
    let n = curve.rows.len();
    for (i, r) in curve.rows.iter().enumerate() {
        let x = f.x(i, n);
        f.x_tick(x, &r.layer.to_string());
    }
    let acc: Vec<f64> = curve.rows.iter().map(|r| r.val_acc).collect();
    polyline(&mut f, &acc, "#1f77b4");
    f.finish()
}

/// Validation accuracy per epoch.
pub fn training_curve(report: &TrainReport) -> String {
    let mut f = Frame::new(
        &format!("Adapter training: {}", report.dataset),
        "epoch",
        "validation accuracy",
        1.0,
    );
    let n = report.epochs.len();
    let step = n.div_ceil(10).max(1);
    for (i, e) in report.epochs.iter().enumerate() {
        if i % step == 0 || i + 1 == n {
            let x = f.x(i, n);
            f.x_tick(x, &e.epoch.to_string());
        }
    }
    let acc: Vec<f64> = report.epochs.iter().map(|e| e.val_accuracy).collect();
    polyline(&mut f, &acc, "#d62728");
    f.finish()
}

/// One bar per backbone importance score.
pub fn score_bars(report: &ImportanceReport) -> String {
    let max = report.scores.iter().map(|s| s.score).fold(0.0, f64::max);
    let mut f = Frame::new("Backbone importance scores", "backbone", "score", if max > 0.0 { max } else { 1.0 });
    let n = report.scores.len();
    let slot = (W - 1.5 * PAD) / n.max(1) as f64;
    for (i, s) in report.scores.iter().enumerate() {
        let x = PAD + slot * (i as f64 + 0.5);
        let y = f.y(s.score);
        let _ = write!(
            f.svg,
            r##"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#2ca02c"/>"##,
            x - slot * 0.35,
            slot * 0.7,
            (H - PAD - y).max(0.0)
        );
        f.x_tick(x, &s.backbone_id);
    }
    f.finish()
}
