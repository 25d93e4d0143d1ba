//! Convergence plots as standalone SVG.
//!
//! A figure has one panel per metric (gamma, delta, beta) with rounds on the
//! x axis and MSE on a log10 y axis. Each series is one experiment variant,
//! averaged over seeds. Colors are fixed by series index.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 36.0;
const GAP: f64 = 24.0;
const METRICS: [&str; 3] = ["mse_gamma", "mse_delta", "mse_beta"];

/// One CSV row as written by `run`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Row {
    pub round: usize,
    pub mse_gamma: f64,
    pub mse_delta: f64,
    pub mse_beta: Option<f64>,
    pub aggregator: String,
    pub attack_mode: String,
    pub deployment: String,
    pub r_a: f64,
    pub seed: u64,
}

impl Row {
    fn metric(&self, i: usize) -> Option<f64> {
        match i {
            0 => Some(self.mse_gamma),
            1 => Some(self.mse_delta),
            _ => self.mse_beta,
        }
    }

    fn variant(&self) -> [String; 4] {
        [
            self.aggregator.clone(),
            self.attack_mode.clone(),
            self.deployment.clone(),
            format!("r_a={}", self.r_a),
        ]
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<Row>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(round, [gamma, delta, beta])`, sorted by round.
    pub points: Vec<(usize, [Option<f64>; 3])>,
}

/// Groups rows by variant (aggregator, attack, deployment, r_a) in order of
/// first appearance and averages each metric over seeds.
pub fn group_series(rows: &[Row]) -> Vec<Series> {
    let mut order: Vec<[String; 4]> = Vec::new();
    let mut sums: Vec<BTreeMap<usize, [(f64, usize); 3]>> = Vec::new();
    for r in rows {
        let key = r.variant();
        let idx = match order.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                order.push(key);
                sums.push(BTreeMap::new());
                order.len() - 1
            }
        };
        let slot = sums[idx].entry(r.round).or_insert([(0.0, 0); 3]);
        for (m, s) in slot.iter_mut().enumerate() {
            if let Some(v) = r.metric(m) {
                s.0 += v;
                s.1 += 1;
            }
        }
    }
    let varying: Vec<usize> = (0..4).filter(|&f| order.iter().any(|k| k[f] != order[0][f])).collect();
    order
        .iter()
        .zip(sums)
        .map(|(key, by_round)| {
            let label = if varying.is_empty() {
                key[0].clone()
            } else {
                varying.iter().map(|&f| key[f].as_str()).collect::<Vec<_>>().join(" / ")
            };
            let points = by_round
                .into_iter()
                .map(|(round, s)| (round, s.map(|(sum, n)| (n > 0).then(|| sum / n as f64))))
                .collect();
            Series { label, points }
        })
        .collect()
}

struct Axis {
    x_max: f64,
    log_lo: f64,
    log_hi: f64,
}

impl Axis {
    fn for_metric(series: &[Series], m: usize) -> Option<Self> {
        let vals: Vec<f64> = series
            .iter()
            .flat_map(|s| s.points.iter().filter_map(move |p| p.1[m]))
            .filter(|v| *v > 0.0 && v.is_finite())
            .collect();
        if vals.is_empty() {
            return None;
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
        let mut hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
        if hi <= lo {
            hi = lo + 1.0;
        }
        let x_max = series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        Some(Self {
            x_max,
            log_lo: lo,
            log_hi: hi,
        })
    }

    fn x(&self, round: usize, left: f64) -> f64 {
        left + MARGIN_L + (PANEL_W - MARGIN_L - 12.0) * round as f64 / self.x_max
    }

    fn y(&self, v: f64) -> f64 {
        let frac = (v.log10() - self.log_lo) / (self.log_hi - self.log_lo);
        MARGIN_T + (PANEL_H - MARGIN_T - MARGIN_B) * (1.0 - frac)
    }
}

/// Renders the three-panel figure.
pub fn render_svg(title: &str, series: &[Series]) -> String {
    let legend_h = 18.0 * series.len() as f64 + 12.0;
    let width = 3.0 * PANEL_W + 2.0 * GAP;
    let height = PANEL_H + legend_h + 24.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#, width / 2.0, escape(title));
    for (m, name) in METRICS.iter().enumerate() {
        let left = m as f64 * (PANEL_W + GAP);
        panel(&mut s, series, m, name, left);
    }
    for (i, ser) in series.iter().enumerate() {
        let y = PANEL_H + 24.0 + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="{color}" stroke-width="2"/><circle cx="{cx}" cy="{y}" r="3" fill="{color}"/><text x="{tx}" y="{ty}">{label}</text>"#,
            x0 = MARGIN_L,
            x1 = MARGIN_L + 24.0,
            cx = MARGIN_L + 12.0,
            tx = MARGIN_L + 32.0,
            ty = y + 4.0,
            label = escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn panel(s: &mut String, series: &[Series], m: usize, name: &str, left: f64) {
    let plot_l = left + MARGIN_L;
    let plot_r = left + PANEL_W - 12.0;
    let plot_t = MARGIN_T;
    let plot_b = PANEL_H - MARGIN_B;
    let _ = writeln!(s, r#"<g class="panel" data-metric="{name}">"#);
    let _ = writeln!(
        s,
        r##"<rect x="{plot_l:.2}" y="{plot_t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
        plot_r - plot_l,
        plot_b - plot_t
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{name}</text>"#, (plot_l + plot_r) / 2.0, plot_t - 6.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#, (plot_l + plot_r) / 2.0, PANEL_H - 6.0);
    let Some(axis) = Axis::for_metric(series, m) else {
        let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="#888">no data</text>"##, (plot_l + plot_r) / 2.0, (plot_t + plot_b) / 2.0);
        s.push_str("</g>\n");
        return;
    };
    let mut decade = axis.log_lo;
    while decade <= axis.log_hi + 1e-9 {
        let y = axis.y(10f64.powf(decade));
        let _ = writeln!(
            s,
            r##"<line x1="{plot_l:.2}" y1="{y:.2}" x2="{plot_r:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{}</text>"##,
            plot_l - 4.0,
            y + 4.0,
            decade as i64
        );
        decade += 1.0;
    }
    let step = ((axis.x_max / 10.0).ceil() as usize).max(1);
    for r in (0..=axis.x_max as usize).step_by(step) {
        let x = axis.x(r, left);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{r}</text>"#, plot_b + 14.0);
    }
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = ser
            .points
            .iter()
            .filter_map(|&(r, v)| v[m].filter(|x| *x > 0.0 && x.is_finite()).map(|v| (axis.x(r, left), axis.y(v))))
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        }
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
    }
    s.push_str("</g>\n");
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads every CSV and renders one figure over all of them.
pub fn plot_files(title: &str, inputs: &[impl AsRef<Path>]) -> Result<String> {
    if inputs.is_empty() {
        bail!("plot needs at least one CSV file");
    }
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(read_rows(p.as_ref())?);
    }
    Ok(render_svg(title, &group_series(&rows)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, agg: &str, seed: u64, delta: f64) -> Row {
        Row {
            round,
            mse_gamma: delta,
            mse_delta: delta,
            mse_beta: None,
            aggregator: agg.into(),
            attack_mode: "none".into(),
            deployment: "none".into(),
            r_a: 0.0,
            seed,
        }
    }

    #[test]
    fn seeds_are_averaged_and_variants_kept_apart() {
        let rows = vec![row(0, "fedavg", 1, 1.0), row(0, "fedavg", 2, 3.0), row(0, "fedmedian", 1, 0.5)];
        let s = group_series(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, "fedavg");
        assert_eq!(s[0].points, vec![(0, [Some(2.0), Some(2.0), None])]);
    }

    #[test]
    fn one_circle_per_point_and_panel() {
        let rows: Vec<Row> = (0..3).map(|r| row(r, "fedavg", 1, 0.1 / (r + 1) as f64)).collect();
        let svg = render_svg("t", &group_series(&rows));
        // gamma and delta have 3 points each, beta none, plus one legend marker.
        assert_eq!(svg.matches("<circle").count(), 7);
        assert!(svg.contains("no data"));
        assert_eq!(svg, render_svg("t", &group_series(&rows)));
    }
}
