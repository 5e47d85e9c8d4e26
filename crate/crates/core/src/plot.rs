//! Minimal SVG line charts for exported tables.

use std::fmt::Write;

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Optional lower/upper band around each point.
    pub band: Option<Vec<(f64, f64)>>,
}

const COLORS: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders `series` with a shared axis; non-finite or (on a log axis)
/// non-positive values are skipped.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
    log_y: bool,
) -> String {
    let ok = |y: f64| y.is_finite() && (!log_y || y > 0.0);
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            if ok(y) {
                xs.push(x);
                ys.push(ty(y));
            }
        }
        for &(lo, hi) in s.band.iter().flatten() {
            for v in [lo, hi] {
                if ok(v) {
                    ys.push(ty(v));
                }
            }
        }
    }
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (ty(y) - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{PAD},{PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let label = if log_y {
            fmt_tick(10f64.powf(yv))
        } else {
            fmt_tick(yv)
        };
        let y = H - PAD - f * (H - 2.0 * PAD);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#,
            PAD - 4.0,
            y + 4.0
        );
        let xv = x0 + f * (x1 - x0);
        let x = PAD + f * (W - 2.0 * PAD);
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD + 16.0,
            fmt_tick(xv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if let Some(band) = &s.band {
            let upper: Vec<String> = s
                .points
                .iter()
                .zip(band)
                .filter(|(_, b)| ok(b.0) && ok(b.1))
                .map(|((x, _), b)| format!("{:.1},{:.1}", px(*x), py(b.1)))
                .collect();
            let lower: Vec<String> = s
                .points
                .iter()
                .zip(band)
                .rev()
                .filter(|(_, b)| ok(b.0) && ok(b.1))
                .map(|((x, _), b)| format!("{:.1},{:.1}", px(*x), py(b.0)))
                .collect();
            if !upper.is_empty() {
                let _ = writeln!(
                    out,
                    r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                    upper.join(" "),
                    lower.join(" ")
                );
            }
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| ok(p.1))
            .map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = PAD + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            W - PAD - 150.0,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_skips_bad_values() {
        let s = Series {
            name: "a<b",
            points: vec![(0.0, 1.0), (1.0, f64::INFINITY), (2.0, 10.0)],
            band: None,
        };
        let svg = line_chart("t", "x", "y", &[s], true);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("inf") && !svg.contains("NaN"));
    }
}
