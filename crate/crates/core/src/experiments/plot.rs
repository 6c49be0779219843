//! Minimal SVG line charts drawn straight from a training trace.

use std::fmt::Write as _;

use crate::metrics::TrainingTrace;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub colour: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with a shared linear x axis and a y axis spanning the data.
pub fn line_chart(title: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(
            out,
            r#"<text x="4" y="{y}" font-family="sans-serif" font-size="10">{}</text>"#,
            fmt_tick(v)
        );
    }
    for (v, x) in [(x0, left), (x1, right)] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            bottom + 16.0,
            fmt_tick(v)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let mut d = String::new();
        for &(x, y) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(d, "{}{:.2} {:.2} ", if d.is_empty() { "M" } else { "L" }, sx(x), sy(y));
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" stroke="{}" fill="none" stroke-width="1.5"/>"#,
            d.trim_end(),
            s.colour
        );
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            right - 120.0,
            s.colour,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Train and test accuracy against epoch.
pub fn accuracy_chart(title: &str, trace: &TrainingTrace) -> String {
    let pick = |f: fn(&crate::metrics::EpochRecord) -> f64| {
        trace.records.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>()
    };
    line_chart(
        title,
        &[
            Series {
                label: "train accuracy",
                colour: "#1f77b4",
                points: pick(|r| r.train_acc),
            },
            Series {
                label: "test accuracy",
                colour: "#d62728",
                points: pick(|r| r.test_acc),
            },
        ],
    )
}

/// L2 norm against epoch.
pub fn norm_chart(title: &str, trace: &TrainingTrace) -> String {
    line_chart(
        title,
        &[Series {
            label: "L2 norm",
            colour: "#2ca02c",
            points: trace.records.iter().map(|r| (r.epoch as f64, r.l2)).collect(),
        }],
    )
}
