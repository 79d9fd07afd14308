//! Minimal standalone SVG charts: scatter-versus-fit and loss curves.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 160.0;
const PAD_T: f64 = 32.0;
const PAD_B: f64 = 48.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// A named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A text label anchored at a data coordinate.
pub struct Note {
    pub x: f64,
    pub y: f64,
    pub text: String,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(pts: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Self { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let m = 0.05 * (y1 - y0);
        Self { x0, x1, y0: y0 - m, y1: y1 + m }
    }

    fn sx(&self, x: f64) -> f64 {
        PAD_L + (x - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)
    }

    fn sy(&self, y: f64) -> f64 {
        H - PAD_B - (y - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a line chart with optional scatter markers and annotations.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    lines: &[Series],
    markers: &[Series],
    notes: &[Note],
) -> String {
    let frame = Frame::fit(
        lines
            .iter()
            .chain(markers)
            .flat_map(|s| s.points.iter().copied())
            .chain(notes.iter().map(|n| (n.x, n.y))),
    );
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" font-size="13" text-anchor="middle">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (bx0, bx1, by0, by1) = (PAD_L, W - PAD_R, PAD_T, H - PAD_B);
    writeln!(s, r#"<rect x="{bx0}" y="{by0}" width="{}" height="{}" fill="none" stroke="black"/>"#, bx1 - bx0, by1 - by0).unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = frame.x0 + f * (frame.x1 - frame.x0);
        let yv = frame.y0 + f * (frame.y1 - frame.y0);
        let (px, py) = (frame.sx(xv), frame.sy(yv));
        writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, by1 + 14.0, tick(xv)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, bx0 - 4.0, py + 4.0, tick(yv)).unwrap();
        writeln!(s, r##"<line x1="{bx0}" x2="{bx1}" y1="{py:.1}" y2="{py:.1}" stroke="#ddd"/>"##).unwrap();
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (bx0 + bx1) / 2.0, H - 10.0, escape(x_label)).unwrap();
    writeln!(s, r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#, (by0 + by1) / 2.0, (by0 + by1) / 2.0, escape(y_label)).unwrap();

    let mut legend = 0;
    let mut push_legend = |s: &mut String, name: &str, color: &str| {
        let y = PAD_T + 12.0 + 16.0 * legend as f64;
        writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, bx1 + 10.0, y - 9.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, bx1 + 24.0, escape(name)).unwrap();
        legend += 1;
    };
    for (i, m) in markers.iter().enumerate() {
        let color = COLORS[(i + lines.len()) % COLORS.len()];
        for &(x, y) in m.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, frame.sx(x), frame.sy(y)).unwrap();
        }
        push_legend(&mut s, &m.name, color);
    }
    for (i, l) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = l
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.sx(x), frame.sy(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        push_legend(&mut s, &l.name, color);
    }
    for n in notes.iter().filter(|n| n.x.is_finite() && n.y.is_finite()) {
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#, frame.sx(n.x), frame.sy(n.y) - 4.0, escape(&n.text)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Empirical `p̂_j` markers against one or more fitted density curves.
pub fn scatter_vs_fit(t: &[f64], p_hat: &[f64], curves: Vec<Series>) -> String {
    let markers = vec![Series { name: "empirical p".into(), points: t.iter().copied().zip(p_hat.iter().copied()).collect() }];
    line_chart("Sampling density: scatter and fit", "masking rate t", "density", &curves, &markers, &[])
}

/// Loss curves annotated with their first-5 and last-5 means.
pub fn loss_curves(runs: &[(String, Vec<f64>, f64, f64)]) -> String {
    let lines: Vec<Series> = runs
        .iter()
        .map(|(name, l, _, _)| Series {
            name: name.clone(),
            points: l.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect(),
        })
        .collect();
    let notes: Vec<Note> = runs
        .iter()
        .flat_map(|(_, l, f5, l5)| {
            let end = l.len().saturating_sub(1) as f64;
            [
                Note { x: 0.0, y: *f5, text: format!("first5 {f5:.3}") },
                Note { x: end, y: *l5, text: format!("last5 {l5:.3}") },
            ]
        })
        .collect();
    line_chart("Training loss", "step", "loss", &lines, &[], &notes)
}
