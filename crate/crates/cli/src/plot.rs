//! Self-contained SVG charts for metrics and summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::metrics::{fmt_g6, Table};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>
<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>
"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title),
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM,
        H - BOTTOM,
        (LEFT + W - RIGHT) / 2.0,
        H - 15.0,
        escape(x_label),
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label),
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0,
            fmt_g6(v)
        );
    }
}

fn sy(v: f64) -> f64 {
    H - BOTTOM - v.clamp(0.0, 1.0) * (H - BOTTOM - TOP)
}

fn legend(svg: &mut String, i: usize, label: &str) {
    let y = TOP + 10.0 + 18.0 * i as f64;
    let x = W - RIGHT + 15.0;
    let _ = writeln!(
        svg,
        r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}" class="legend">{}</text>"#,
        y - 10.0,
        COLORS[i % COLORS.len()],
        x + 18.0,
        y,
        escape(label)
    );
}

/// Success-rate curves (one series per run) or ablation bars.
pub fn render_svg(table: &Table) -> String {
    let mut svg = String::new();
    match table {
        Table::Metrics(rows) => {
            let mut runs: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
            for r in rows {
                runs.entry(&r.run_id).or_default().push((r.iteration as f64, r.eval_success_rate));
            }
            let x_max = rows.iter().map(|r| r.iteration).max().unwrap_or(1).max(1) as f64;
            let sx = |x: f64| LEFT + x / x_max * (W - RIGHT - LEFT);
            frame(&mut svg, "evaluation success rate", "iteration", "success rate");
            for i in 0..=4 {
                let x = x_max * i as f64 / 4.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                    sx(x),
                    H - BOTTOM + 16.0,
                    fmt_g6(x.round())
                );
            }
            for (i, (run, pts)) in runs.iter().enumerate() {
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
                    COLORS[i % COLORS.len()],
                    path.join(" ")
                );
                legend(&mut svg, i, run);
            }
        }
        Table::Summary(rows) => {
            let axis = rows.first().map_or("value", |r| r.axis.as_str());
            frame(&mut svg, &format!("final success rate by {axis}"), axis, "success rate");
            let slot = (W - RIGHT - LEFT) / rows.len() as f64;
            for (i, r) in rows.iter().enumerate() {
                let x = LEFT + slot * (i as f64 + 0.15);
                let y = sy(r.final_success_rate);
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/><text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                    slot * 0.7,
                    H - BOTTOM - y,
                    COLORS[0],
                    x + slot * 0.35,
                    H - BOTTOM + 16.0,
                    fmt_g6(r.value)
                );
            }
            legend(&mut svg, 0, "final success rate");
        }
    }
    svg.push_str("</svg>\n");
    svg
}
