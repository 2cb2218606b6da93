//! Minimal deterministic SVG line plots.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLOURS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A labelled dot drawn on top of the curves.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl LinePlot {
    /// Renders one `<path>` per series (non-finite points are skipped) and one
    /// `<circle>` per marker.
    pub fn to_svg(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(pts().map(|p| p.0).chain(self.markers.iter().map(|m| m.x)));
        let (y0, y1) = bounds(pts().map(|p| p.1).chain(self.markers.iter().map(|m| m.y)));
        let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<g stroke="black" stroke-width="1"><line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}"/></g>"#,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN
        );
        for (v, anchor, x, y) in [
            (x0, "start", MARGIN, HEIGHT - MARGIN + 16.0),
            (x1, "end", WIDTH - MARGIN, HEIGHT - MARGIN + 16.0),
        ] {
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{v:.3}</text>"#
            );
        }
        for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
                MARGIN - 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );

        for (k, series) in self.series.iter().enumerate() {
            let colour = COLOURS[k % COLOURS.len()];
            let mut d = String::new();
            let mut pen_down = false;
            for &(x, y) in &series.points {
                if !(x.is_finite() && y.is_finite()) {
                    pen_down = false;
                    continue;
                }
                let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, sx(x), sy(y));
                pen_down = true;
            }
            let _ = writeln!(
                s,
                r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="2"><title>{}</title></path>"#,
                d.trim_end(),
                escape(&series.name)
            );
            let ly = MARGIN + 16.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}" fill="{colour}" text-anchor="end" font-family="sans-serif" font-size="12">{}</text>"#,
                WIDTH - MARGIN - 4.0,
                escape(&series.name)
            );
        }
        for m in &self.markers {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="black"><title>{}</title></circle>"#,
                sx(m.x),
                sy(m.y),
                escape(&m.label)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
                sx(m.x) + 6.0,
                sy(m.y) - 6.0,
                escape(&m.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// `(x, (-ln x)^γ)` at `samples` evenly spaced points of `[0.01, 1]`.
pub fn exp_log_curve(gamma: f64, samples: usize) -> Vec<(f64, f64)> {
    let step = 0.99 / (samples.max(2) - 1) as f64;
    (0..samples.max(2))
        .map(|k| {
            let x = 0.01 + step * k as f64;
            (x, crate::losses::exp_log(x, gamma))
        })
        .collect()
}

/// `(-ln x)^γ` for each γ plus the linear loss `1 - x`. Curves with `γ < 1` are
/// marked where `|d/dx (-ln x)^γ|` is smallest, `x* = e^(γ-1)`.
pub fn loss_curve_plot(gammas: &[f64], samples: usize) -> crate::Result<LinePlot> {
    if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(crate::Error::InvalidConfig(format!("γ must be > 0, got {g}")));
    }
    let mut series: Vec<Series> = gammas
        .iter()
        .map(|&g| Series {
            name: format!("(-ln x)^{g}"),
            points: exp_log_curve(g, samples),
        })
        .collect();
    series.push(Series {
        name: "1 - x".into(),
        points: exp_log_curve(1.0, samples).into_iter().map(|(x, _)| (x, 1.0 - x)).collect(),
    });
    let markers = gammas
        .iter()
        .filter(|&&g| g < 1.0)
        .map(|&g| {
            let x = (g - 1.0).exp();
            Marker {
                x,
                y: crate::losses::exp_log(x, g),
                label: format!("x* = {x:.4} (γ = {g})"),
            }
        })
        .collect();
    Ok(LinePlot {
        title: "Loss functions with different nonlinearities".into(),
        x_label: "x (Dice or probability)".into(),
        y_label: "loss".into(),
        series,
        markers,
    })
}
