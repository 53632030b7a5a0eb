use std::collections::BTreeMap;
use std::fmt::Write;

use super::{ellipse_stats, ResultRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Scatter of test violation against test AUROC, one colour per method
/// (fairret and strength), with standard-error ellipses over seeds.
pub fn scatter_svg(rows: &[ResultRow], title: &str) -> String {
    let mut methods: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.status == "ok") {
        if let (Some(v), Some(a)) = (row.optimized_test_violation(), row.test_auroc) {
            let name = if row.strength == 0.0 {
                "unfair".to_string()
            } else {
                format!("{} λ={}", row.fairret, row.strength)
            };
            methods.entry(name).or_default().push([v, a]);
        }
    }
    let all: Vec<[f64; 2]> = methods.values().flatten().copied().collect();
    let (mut x_max, mut y_min, mut y_max) = (0.0f64, 1.0f64, 0.0f64);
    for p in &all {
        x_max = x_max.max(p[0]);
        y_min = y_min.min(p[1]);
        y_max = y_max.max(p[1]);
    }
    if all.is_empty() || y_max <= y_min {
        (y_min, y_max) = (0.0, 1.0);
    }
    let x_max = if x_max > 0.0 { x_max * 1.1 } else { 1.0 };
    let pad = 0.05 * (y_max - y_min).max(1e-3);
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);
    let sx = |x: f64| MARGIN + x / x_max * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = t * x_max;
        let yv = y_lo + t * (y_hi - y_lo);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#,
            sx(xv),
            y0 + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            x0 - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">max violation (test)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">AUROC (test)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    for (i, (name, points)) in methods.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for p in points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{colour}" fill-opacity="0.5"/>"#,
                sx(p[0]),
                sy(p[1])
            );
        }
        if let Ok(e) = ellipse_stats(points) {
            let [[a, b], [_, d]] = e.covariance;
            // Principal axes of the 2x2 covariance in data units, mapped to pixels.
            let mid = 0.5 * (a + d);
            let rad = (0.25 * (a - d).powi(2) + b * b).sqrt();
            let (l1, l2) = ((mid + rad).max(0.0), (mid - rad).max(0.0));
            let angle = 0.5 * (2.0 * b).atan2(a - d);
            let kx = (WIDTH - 2.0 * MARGIN) / x_max;
            let ky = (HEIGHT - 2.0 * MARGIN) / (y_hi - y_lo);
            let mut path = String::new();
            for step in 0..=48 {
                let t = step as f64 / 48.0 * std::f64::consts::TAU;
                let (u, v) = (l1.sqrt() * t.cos(), l2.sqrt() * t.sin());
                let dx = u * angle.cos() - v * angle.sin();
                let dy = u * angle.sin() + v * angle.cos();
                let (px, py) = (sx(e.mean[0]) + dx * kx, sy(e.mean[1]) - dy * ky);
                let _ = write!(
                    path,
                    "{}{px:.2},{py:.2} ",
                    if step == 0 { "M" } else { "L" }
                );
            }
            let _ = writeln!(
                svg,
                r#"<path d="{}Z" stroke="{colour}" fill="{colour}" fill-opacity="0.15"/>"#,
                path.trim_end()
            );
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{colour}"/>"#,
                sx(e.mean[0]),
                sy(e.mean[1])
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{colour}"/>"#,
            WIDTH - MARGIN - 150.0,
            ly - 9.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}">{}</text>"#,
            WIDTH - MARGIN - 135.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
