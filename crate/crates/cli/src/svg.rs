//! Minimal self-contained SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Shaded region between two curves sharing x values.
pub struct Band {
    pub name: String,
    pub x: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub opacity: f64,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub bands: Vec<Band>,
    /// Horizontal reference line.
    pub reference: Option<f64>,
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(self.bands.iter().flat_map(|b| b.x.iter().copied()));
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(self.bands.iter().flat_map(|b| b.lo.iter().chain(&b.hi).copied()))
            .chain(self.reference);
        let finite = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        };
        let (mut x0, mut x1) = finite(&mut { xs });
        let (mut y0, mut y1) = finite(&mut { ys });
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        let pad = ((y1 - y0) * 0.05).max(1e-9);
        y0 -= pad;
        y1 += pad;
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            num(LEFT + pw / 2.0),
            escape(&self.title)
        );
        for t in nice_ticks(x0, x1, 6) {
            let x = sx(t);
            let _ = writeln!(
                out,
                r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#dddddd"/><text x="{0}" y="{3}" text-anchor="middle">{4}</text>"##,
                num(x),
                num(TOP),
                num(TOP + ph),
                num(TOP + ph + 16.0),
                tick_label(t)
            );
        }
        for t in nice_ticks(y0, y1, 6) {
            let y = sy(t);
            let _ = writeln!(
                out,
                r##"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="#dddddd"/><text x="{3}" y="{4}" text-anchor="end">{5}</text>"##,
                num(LEFT),
                num(y),
                num(LEFT + pw),
                num(LEFT - 6.0),
                num(y + 4.0),
                tick_label(t)
            );
        }
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            num(LEFT),
            num(TOP),
            num(pw),
            num(ph)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(LEFT + pw / 2.0),
            num(HEIGHT - 10.0),
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            num(TOP + ph / 2.0),
            escape(&self.y_label)
        );
        if let Some(r) = self.reference.filter(|r| r.is_finite()) {
            let _ = writeln!(
                out,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black" stroke-dasharray="4 3"/>"#,
                num(LEFT),
                num(sy(r)),
                num(LEFT + pw)
            );
        }
        let mut legend = Vec::new();
        for (k, b) in self.bands.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut pts: Vec<String> = Vec::new();
            for (x, y) in b.x.iter().zip(&b.hi) {
                pts.push(format!("{},{}", num(sx(*x)), num(sy(*y))));
            }
            for (x, y) in b.x.iter().zip(&b.lo).rev() {
                pts.push(format!("{},{}", num(sx(*x)), num(sy(*y))));
            }
            let _ = writeln!(
                out,
                r#"<polygon points="{}" fill="{color}" fill-opacity="{}" stroke="none"/>"#,
                pts.join(" "),
                b.opacity
            );
            legend.push((b.name.clone(), color, b.opacity));
        }
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y))))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
            legend.push((s.name.clone(), color, 1.0));
        }
        for (k, (name, color, opacity)) in legend.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * k as f64;
            let x = LEFT + pw + 12.0;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="14" height="10" fill="{color}" fill-opacity="{opacity}"/><text x="{}" y="{}">{}</text>"#,
                num(x),
                num(y - 9.0),
                num(x + 20.0),
                num(y),
                escape(name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.1, 0.9, 6);
        assert!(t.first().unwrap() >= &0.1 && t.last().unwrap() <= &0.9);
        assert!(t.len() >= 3);
    }

    #[test]
    fn renders_balanced_document() {
        let chart = Chart {
            title: "QTE <curve>".into(),
            x_label: "tau".into(),
            y_label: "delta".into(),
            series: vec![Series {
                name: "SA".into(),
                points: vec![(0.1, 1.0), (0.5, 2.0), (0.9, 1.5)],
            }],
            bands: vec![Band {
                name: "95%".into(),
                x: vec![0.1, 0.5, 0.9],
                lo: vec![0.5, 1.5, 1.0],
                hi: vec![1.5, 2.5, 2.0],
                opacity: 0.2,
            }],
            reference: Some(0.0),
        };
        let svg = chart.render();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("QTE &lt;curve&gt;"));
        assert!(!svg.contains("href"));
    }
}
