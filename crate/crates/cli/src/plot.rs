//! Minimal SVG line plots: stacked panels, one `<path>` per series.

use std::fmt::Write as _;

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const GAP: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { name: name.into(), x, y }
    }

    /// Series sampled at `x = offset + i·step`.
    pub fn uniform(name: impl Into<String>, offset: f64, step: f64, y: Vec<f64>) -> Self {
        let x = (0..y.len()).map(|i| offset + i as f64 * step).collect();
        Self::new(name, x, y)
    }
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(title: &str, panels: &[Panel]) -> String {
    let height = MARGIN_TOP + panels.len() as f64 * (PANEL_HEIGHT + GAP);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    for (p, panel) in panels.iter().enumerate() {
        let top = MARGIN_TOP + p as f64 * (PANEL_HEIGHT + GAP);
        let (x0, x1) = range(panel.series.iter().flat_map(|s| s.x.iter().copied()));
        let (y0, y1) = range(panel.series.iter().flat_map(|s| s.y.iter().copied()));
        let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let py = |y: f64| top + PANEL_HEIGHT - (y - y0) / (y1 - y0) * PANEL_HEIGHT;
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN_LEFT}" y="{top}" width="{plot_w}" height="{PANEL_HEIGHT}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(out, r#"<text x="{MARGIN_LEFT}" y="{}">{}</text>"#, top - 6.0, escape(&panel.title));
        for (v, anchor_y) in [(y0, top + PANEL_HEIGHT), (y1, top + 10.0)] {
            let _ = writeln!(out, r#"<text x="{}" y="{anchor_y}" text-anchor="end">{v:.3}</text>"#, MARGIN_LEFT - 4.0);
        }
        for (v, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#,
                px(v),
                top + PANEL_HEIGHT + 15.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            top + PANEL_HEIGHT + 30.0,
            escape(&panel.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">{}</text>"#,
            top + PANEL_HEIGHT / 2.0,
            top + PANEL_HEIGHT / 2.0,
            escape(&panel.y_label)
        );
        for (i, s) in panel.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut d = String::new();
            let mut pen_down = false;
            for (&x, &y) in s.x.iter().zip(&s.y) {
                if !(x.is_finite() && y.is_finite()) {
                    pen_down = false;
                    continue;
                }
                let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, px(x), py(y));
                pen_down = true;
            }
            let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#, d.trim_end());
            let ly = top + 14.0 + 16.0 * i as f64;
            let lx = WIDTH - MARGIN_RIGHT + 10.0;
            let _ = writeln!(out, r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/>"#, ly - 4.0, lx + 18.0, ly - 4.0);
            let _ = writeln!(out, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 24.0, escape(&s.name));
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_path_per_series() {
        let panels = [
            Panel {
                title: "a".into(),
                x_label: "t".into(),
                y_label: "y".into(),
                series: vec![Series::uniform("s1", 0.0, 1.0, vec![1.0, 2.0]), Series::uniform("s2", 0.0, 1.0, vec![0.0, f64::NAN, 1.0])],
            },
            Panel {
                title: "<b>".into(),
                x_label: "t".into(),
                y_label: "y".into(),
                series: vec![Series::uniform("flat", 0.0, 1.0, vec![3.0; 4])],
            },
        ];
        let svg = render("plot", &panels);
        assert_eq!(svg.matches("<path").count(), 3);
        assert!(svg.contains("&lt;b&gt;"));
        assert!(!svg.contains("NaN"));
    }
}
