//! Static SVG charts rendered from CSV text. Output is a pure function of
//! the input, so re-plotting the same CSV is byte-identical.

use std::fmt::Write;

use anyhow::{bail, Context, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 64.0;
const MR: f64 = 150.0;
const MT: f64 = 40.0;
const MB: f64 = 70.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    Line,
    Bar,
}

pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_range(series: &[Series], kind: ChartKind) -> (f64, f64) {
    let vals = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if kind == ChartKind::Bar {
        lo = lo.min(0.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    (if kind == ChartKind::Bar { lo } else { lo - pad }, hi + pad)
}

pub fn render(title: &str, x_labels: &[String], series: &[Series], kind: ChartKind) -> String {
    let (lo, hi) = y_range(series, kind);
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let n = x_labels.len().max(1);
    let ys = |v: f64| MT + ph * (1.0 - (v - lo) / (hi - lo));
    let slot = pw / n as f64;
    let xc = |i: usize| ML + slot * (i as f64 + 0.5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, esc(title));
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = ys(v);
        let _ = writeln!(
            s,
            r##"<line x1="{ML:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            ML + pw,
            ML - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{ML:.1}" y="{MT:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    for (i, l) in x_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" transform="rotate(-35 {:.1} {:.1})">{}</text>"#,
            xc(i),
            MT + ph + 16.0,
            xc(i),
            MT + ph + 16.0,
            esc(l)
        );
    }
    let k = series.len().max(1);
    for (si, ser) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        match kind {
            ChartKind::Line => {
                let pts: Vec<String> = ser
                    .values
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.is_finite())
                    .map(|(i, &v)| format!("{:.1},{:.1}", xc(i), ys(v)))
                    .collect();
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
                for p in &pts {
                    let (x, y) = p.split_once(',').expect("point");
                    let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
                }
            }
            ChartKind::Bar => {
                let bw = slot * 0.8 / k as f64;
                for (i, &v) in ser.values.iter().enumerate() {
                    if !v.is_finite() {
                        continue;
                    }
                    let x = ML + slot * i as f64 + slot * 0.1 + bw * si as f64;
                    let (y0, y1) = (ys(v.max(0.0)), ys(v.min(0.0).max(lo)));
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.1}" y="{y0:.1}" width="{bw:.1}" height="{:.1}" fill="{color}"/>"#,
                        (y1 - y0).max(0.0)
                    );
                }
            }
        }
        let ly = MT + 14.0 + 16.0 * si as f64;
        let lx = ML + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 9.0,
            lx + 14.0,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Plots `columns` of a CSV (first column gives the x labels).
pub fn chart_from_csv(title: &str, csv_text: &str, columns: &[&str], kind: ChartKind) -> Result<String> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .with_context(|| format!("CSV lacks column `{c}`"))
        })
        .collect::<Result<_>>()?;
    let mut labels = Vec::new();
    let mut series: Vec<Series> = columns
        .iter()
        .map(|c| Series {
            name: c.to_string(),
            values: Vec::new(),
        })
        .collect();
    for rec in rdr.records() {
        let rec = rec?;
        labels.push(rec.get(0).unwrap_or_default().to_string());
        for (s, &i) in series.iter_mut().zip(&idx) {
            let v = rec.get(i).unwrap_or_default();
            s.values.push(if v.is_empty() { f64::NAN } else { v.parse().with_context(|| format!("bad number `{v}`"))? });
        }
    }
    if labels.is_empty() {
        bail!("CSV has no rows to plot");
    }
    Ok(render(title, &labels, &series, kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replot_is_byte_identical() {
        let csv = "stage,similarity\nbackbone,0.8\npositional,0.79\nenc0,0.6\n";
        let a = chart_from_csv("t", csv, &["similarity"], ChartKind::Line).unwrap();
        let b = chart_from_csv("t", csv, &["similarity"], ChartKind::Line).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.contains("polyline"));
        let bars = chart_from_csv("t", "cell,m\na,0.5\nb,0.25\n", &["m"], ChartKind::Bar).unwrap();
        assert_eq!(bars.matches("<rect").count(), 2 + 2 + 1);
    }

    #[test]
    fn missing_column_is_error() {
        assert!(chart_from_csv("t", "a,b\nx,1\n", &["c"], ChartKind::Line).is_err());
    }
}
