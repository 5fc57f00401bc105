//! Minimal static SVG line charts for run directories.

use std::fmt::Write;

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 4] = ["steelblue", "firebrick", "seagreen", "rebeccapurple"];
const W: f64 = 560.0;
const H: f64 = 220.0;
const PAD: f64 = 40.0;

fn bounds(series: &[Series<'_>]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

fn panel(out: &mut String, top: f64, title: &str, series: &[Series<'_>]) {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| top + H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let _ = writeln!(
        out,
        r#"<rect x="{PAD}" y="{}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
        top + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(out, r#"<text x="{PAD}" y="{}" font-size="13">{title}</text>"#, top + PAD - 8.0);
    let _ = writeln!(out, r#"<text x="4" y="{}" font-size="10">{y1:.3}</text>"#, top + PAD + 4.0);
    let _ = writeln!(out, r#"<text x="4" y="{}" font-size="10">{y0:.3}</text>"#, top + H - PAD);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{x1}</text>"#, W - PAD - 20.0, top + H - PAD + 14.0);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 150.0,
            top + PAD + 14.0 * (k as f64 + 1.0),
            s.label
        );
    }
}

/// Stacked panels, each `(title, series)`, sharing the x axis label.
pub fn svg(panels: &[(&str, Vec<Series<'_>>)], x_label: &str) -> String {
    let height = H * panels.len() as f64 + 20.0;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" font-family="sans-serif">"#
    );
    out.push('\n');
    for (i, (title, series)) in panels.iter().enumerate() {
        panel(&mut out, H * i as f64, title, series);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11">{x_label}</text>"#, W / 2.0 - 30.0, height - 6.0);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_polyline_per_series() {
        let s = svg(
            &[(
                "reward",
                vec![
                    Series { label: "a", points: vec![(0.0, 1.0), (1.0, 2.0)] },
                    Series { label: "b", points: vec![(0.0, f64::NAN)] },
                ],
            )],
            "iteration",
        );
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }
}
