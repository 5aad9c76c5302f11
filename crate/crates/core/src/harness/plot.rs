//! Two-panel SVG per scenario: seed-mean loss and cumulative regret with
//! 95% bands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::stats::{ci95, mean};
use super::{read_run, MetricRow};
use crate::error::{Error, Result};

pub fn color(algorithm: &str) -> &'static str {
    match algorithm {
        "rasp" => "#d62728",
        "cma" => "#2ca02c",
        "gp" => "#1f77b4",
        "rs" => "#7f7f7f",
        "nomem" => "#ff7f0e",
        _ => "#000000",
    }
}

/// Per-step mean and CI half-width across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub algorithm: String,
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
}

pub fn bands(rows: &[&MetricRow], value: impl Fn(&MetricRow) -> f64) -> Vec<Band> {
    let mut by_alg: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        by_alg.entry(&r.algorithm).or_default().entry(r.step).or_default().push(value(r));
    }
    by_alg
        .into_iter()
        .map(|(alg, steps)| Band {
            algorithm: alg.to_string(),
            mean: steps.values().map(|v| mean(v)).collect(),
            half_width: steps.values().map(|v| ci95(v)).collect(),
        })
        .collect()
}

const W: f64 = 960.0;
const H: f64 = 400.0;
const PANEL_W: f64 = 400.0;
const PANEL_H: f64 = 280.0;
const TOP: f64 = 60.0;

fn panel(svg: &mut String, x0: f64, title: &str, data: &[Band]) {
    let finite = |v: &f64| v.is_finite();
    let lo = data
        .iter()
        .flat_map(|b| b.mean.iter().zip(&b.half_width).map(|(m, h)| m - h))
        .filter(finite)
        .fold(f64::INFINITY, f64::min);
    let hi = data
        .iter()
        .flat_map(|b| b.mean.iter().zip(&b.half_width).map(|(m, h)| m + h))
        .filter(finite)
        .fold(f64::NEG_INFINITY, f64::max);
    let n = data.iter().map(|b| b.mean.len()).max().unwrap_or(0);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{title}</text>"#,
        x0 + PANEL_W / 2.0,
        TOP - 12.0
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{x0}" y="{TOP}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#333"/>"##
    );
    if !(lo.is_finite() && hi.is_finite()) || n == 0 {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">no data for this panel</text>"#,
            x0 + PANEL_W / 2.0,
            TOP + PANEL_H / 2.0
        );
        return;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let sx = |i: usize| x0 + PANEL_W * i as f64 / (n.max(2) - 1) as f64;
    let sy = |v: f64| TOP + PANEL_H * (1.0 - (v - lo) / span);
    for (v, anchor) in [(lo, TOP + PANEL_H), (hi, TOP + 10.0)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{anchor}" font-size="10" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">step</text>"#,
        x0 + PANEL_W / 2.0,
        TOP + PANEL_H + 16.0
    );
    for b in data {
        let c = color(&b.algorithm);
        let upper: Vec<String> = b
            .mean
            .iter()
            .zip(&b.half_width)
            .enumerate()
            .map(|(i, (m, h))| format!("{:.2},{:.2}", sx(i), sy(m + h)))
            .collect();
        let lower: Vec<String> = b
            .mean
            .iter()
            .zip(&b.half_width)
            .enumerate()
            .rev()
            .map(|(i, (m, h))| format!("{:.2},{:.2}", sx(i), sy(m - h)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="band" data-alg="{}" points="{} {}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#,
            b.algorithm,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = b
            .mean
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{:.2},{:.2}", sx(i), sy(*m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-alg="{}" points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
            b.algorithm,
            line.join(" ")
        );
    }
}

/// SVG text for one scenario.
pub fn scenario_svg(scenario: &str, rows: &[&MetricRow]) -> String {
    let loss = bands(rows, |r| r.true_loss);
    let regret = bands(rows, |r| r.cumulative_regret);
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
    );
    svg.push('\n');
    let _ = writeln!(svg, r#"<text x="{}" y="22" font-size="16" text-anchor="middle">{scenario}</text>"#, W / 2.0);
    panel(&mut svg, 60.0, "loss", &loss);
    panel(&mut svg, 540.0, "cumulative regret", &regret);
    for (i, b) in loss.iter().enumerate() {
        let x = 60.0 + 110.0 * i as f64;
        let y = H - 18.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="3"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            x + 20.0,
            color(&b.algorithm),
            x + 25.0,
            y + 4.0,
            b.algorithm
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `{scenario}.svg` for every scenario found in the run directory.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_run(dir)?;
    if rows.is_empty() {
        return Err(Error::InvalidConfig(format!("no run CSVs in {}", dir.display())));
    }
    let mut by_scenario: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for r in &rows {
        by_scenario.entry(&r.scenario).or_default().push(r);
    }
    let mut out = Vec::new();
    for (scenario, rows) in by_scenario {
        let path = dir.join(format!("{scenario}.svg"));
        fs::write(&path, scenario_svg(scenario, &rows)).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
