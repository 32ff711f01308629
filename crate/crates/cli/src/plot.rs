//! Static SVG line charts for training curves and overlap sweeps.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use collabqa::arena::{CurveSeries, SweepPoint};

/// One labeled line; `band` holds the (min, max) at each x when the line
/// aggregates several runs.
pub struct Line {
    pub label: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
    pub band: Option<Vec<(f64, f64)>>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub lines: Vec<Line>,
}

const EMA_COLOR: &str = "#1f77b4";
const EMP_COLOR: &str = "#d62728";

/// Mean, min and max of `ys`.
fn spread(ys: &[f64]) -> (f64, f64, f64) {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, lo, hi)
}

fn aggregate(label: &str, color: &'static str, groups: &BTreeMap<u64, Vec<f64>>, xs: impl Fn(u64) -> f64) -> Line {
    let multi = groups.values().any(|v| v.len() > 1);
    let mut points = Vec::new();
    let mut band = Vec::new();
    for (&k, ys) in groups {
        let (m, lo, hi) = spread(ys);
        points.push((xs(k), 100.0 * m));
        band.push((100.0 * lo, 100.0 * hi));
    }
    Line { label: label.to_string(), color, points, band: multi.then_some(band) }
}

/// Mean EMA and EMP over seeds at every epoch all series share.
pub fn curves_chart(series: &[CurveSeries]) -> Result<Chart> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        bail!("curve file has no points");
    }
    let mut ema: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut emp: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for p in &series[0].points {
        let e = p.epoch as u64;
        let at: Vec<_> = series.iter().filter_map(|s| s.points.iter().find(|q| q.epoch == p.epoch)).collect();
        if at.len() == series.len() {
            ema.insert(e, at.iter().map(|q| q.ema).collect());
            emp.insert(e, at.iter().map(|q| q.emp).collect());
        }
    }
    let seeds = series.len();
    Ok(Chart {
        title: format!("Moderator training curve ({seeds} seed{})", if seeds == 1 { "" } else { "s" }),
        x_label: "epoch".into(),
        y_label: "dev accuracy (%)".into(),
        lines: vec![aggregate("EMA", EMA_COLOR, &ema, |e| e as f64), aggregate("EMP", EMP_COLOR, &emp, |e| e as f64)],
    })
}

/// Mean test EMA and EMP over seeds at every overlap ratio.
pub fn sweep_chart(points: &[SweepPoint]) -> Result<Chart> {
    if points.is_empty() {
        bail!("sweep file has no points");
    }
    // Ratios are keyed in millionths so equal ratios group together.
    let key = |r: f64| (r * 1e6).round() as u64;
    let mut ema: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut emp: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for p in points {
        ema.entry(key(p.ratio)).or_default().push(p.ema);
        emp.entry(key(p.ratio)).or_default().push(p.emp);
    }
    Ok(Chart {
        title: "Test accuracy against overlap ratio".into(),
        x_label: "overlap ratio".into(),
        y_label: "test accuracy (%)".into(),
        lines: vec![
            aggregate("EMA", EMA_COLOR, &ema, |k| k as f64 / 1e6),
            aggregate("EMP", EMP_COLOR, &emp, |k| k as f64 / 1e6),
        ],
    })
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn fmt_tick(v: f64) -> String {
    if v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let xs: Vec<f64> = self.lines.iter().flat_map(|l| l.points.iter().map(|p| p.0)).collect();
        let (mut x0, mut x1) =
            (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        if !(x1 > x0) {
            x0 -= 0.5;
            x1 += 0.5;
        }
        let (y0, y1) = (0.0, 100.0);
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let mut w = |t: String| s.push_str(&t);
        w(format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        w(format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
        w(format!(
            "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            W / 2.0,
            escape(&self.title)
        ));
        for i in 0..=5 {
            let y = y0 + (y1 - y0) * i as f64 / 5.0;
            let py = sy(y);
            w(format!(
                "<line x1=\"{LEFT}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#e0e0e0\"/>\n",
                W - RIGHT
            ));
            w(format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
                LEFT - 6.0,
                py + 4.0,
                fmt_tick(y)
            ));
        }
        for i in 0..=5 {
            let x = x0 + (x1 - x0) * i as f64 / 5.0;
            let px = sx(x);
            w(format!(
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                TOP + ph,
                TOP + ph + 5.0
            ));
            w(format!(
                "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                TOP + ph + 18.0,
                fmt_tick(x)
            ));
        }
        w(format!(
            "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"black\"/>\n"
        ));
        w(format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            LEFT + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        ));
        w(format!(
            "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        ));
        for line in &self.lines {
            if let Some(band) = &line.band {
                let mut pts: Vec<String> =
                    line.points.iter().zip(band).map(|(p, b)| format!("{:.1},{:.1}", sx(p.0), sy(b.1))).collect();
                pts.extend(line.points.iter().zip(band).rev().map(|(p, b)| format!("{:.1},{:.1}", sx(p.0), sy(b.0))));
                w(format!(
                    "<polygon class=\"band\" points=\"{}\" fill=\"{}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n",
                    pts.join(" "),
                    line.color
                ));
            }
            let pts: Vec<String> = line.points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
            w(format!(
                "<polyline class=\"series\" points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                pts.join(" "),
                line.color
            ));
        }
        for (i, line) in self.lines.iter().enumerate() {
            let y = TOP + 14.0 + 18.0 * i as f64;
            let x = LEFT + 12.0;
            w(format!(
                "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                x + 20.0,
                line.color
            ));
            w(format!("<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n", x + 26.0, y + 4.0, escape(&line.label)));
        }
        w("</svg>\n".to_string());
        s
    }
}
