//! Minimal SVG figure of a sweep summary: per-cell accuracy bars and the
//! clip-count curves of the baseline and the λ = 1, γ = 30 student.

use std::fmt::Write;

use crate::sweep::{CellSummary, SweepSummary};

const W: f64 = 720.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;

fn cell_name(c: &CellSummary) -> String {
    match c.gamma {
        None => format!("λ{}", c.lambda),
        Some(g) => format!("λ{} γ{}", c.lambda, g),
    }
}

pub fn render(s: &SweepSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10">"#,
        2.0 * W,
        H
    );
    bars(&mut out, s);
    curves(&mut out, s);
    out.push_str("</svg>\n");
    out
}

fn y_of(acc: f64) -> f64 {
    H - PAD - acc.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

fn axes(out: &mut String, x0: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<line x1="{x}" y1="{t}" x2="{x}" y2="{b}" stroke="black"/><line x1="{x}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        x = x0 + PAD,
        t = PAD,
        b = H - PAD,
        r = x0 + W - PAD / 2.0
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{tick:.2}</text>"#,
            x0 + PAD - 4.0,
            y_of(tick) + 3.0
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="20" font-size="12">{title}</text>"#, x0 + PAD);
}

fn bars(out: &mut String, s: &SweepSummary) {
    axes(out, 0.0, "accuracy per cell");
    let n = s.cells.len().max(1) as f64;
    let slot = (W - 1.5 * PAD) / n;
    for (i, c) in s.cells.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.15;
        let y = y_of(c.accuracy.mean);
        let _ = writeln!(
            out,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="#4a78b0"/>"##,
            slot * 0.7,
            H - PAD - y
        );
        let (lo, hi) = (y_of(c.accuracy.mean - c.accuracy.std), y_of(c.accuracy.mean + c.accuracy.std));
        let cx = x + slot * 0.35;
        let _ = writeln!(out, r#"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="black"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - PAD + 14.0,
            cell_name(c)
        );
    }
}

fn curves(out: &mut String, s: &SweepSummary) {
    axes(out, W, "accuracy vs clips");
    let clips: Vec<usize> = s.spec.clips.clone();
    let span = (clips.len().max(2) - 1) as f64;
    let x_of = |i: usize| W + PAD + 20.0 + i as f64 * (W - 2.5 * PAD - 20.0) / span;
    for (i, n) in clips.iter().enumerate() {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{n}</text>"#, x_of(i), H - PAD + 14.0);
    }
    let series = [((0.0, None), "#b04a4a", "baseline"), ((1.0, Some(30.0)), "#4ab06a", "student")];
    for (k, ((l, g), colour, name)) in series.iter().enumerate() {
        let Some(c) = s.cells.iter().find(|c| c.lambda == *l && c.gamma == *g) else {
            continue;
        };
        let points: Vec<String> = clips
            .iter()
            .enumerate()
            .filter_map(|(i, n)| c.clip_accuracy.get(n).map(|st| format!("{:.1},{:.1}", x_of(i), y_of(st.mean))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" fill="{colour}">{name}</text>"#,
            2.0 * W - 90.0,
            PAD + 14.0 * k as f64
        );
    }
}
