//! Static SVG line charts of gap curves.
//!
//! Two CSV layouts are accepted: the long run output (rows with metric `gap`
//! and agent `all`, averaged over seeds per arm) and a plain
//! `episode, series, gap` table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{HarnessError, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    /// Trailing moving-average window in points (1 leaves the data unchanged).
    pub window: usize,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            title: "CCE-gap".into(),
            window: 1,
        }
    }
}

/// Named series of `(episode, value)` points, sorted by episode.
pub type Series = BTreeMap<String, Vec<(f64, f64)>>;

/// Strip a trailing `-s<seed>` from a run id.
fn arm_label(run_id: &str) -> &str {
    match run_id.rfind("-s") {
        Some(i) if i + 2 < run_id.len() && run_id[i + 2..].bytes().all(|b| b.is_ascii_digit()) => &run_id[..i],
        _ => run_id,
    }
}

fn parse_f64(field: Option<&str>, line: u64, what: &str) -> Result<f64> {
    field
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| HarnessError::Malformed(format!("line {line}: bad {what}")))
}

pub fn read_series(path: &Path) -> Result<Series> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut sums: BTreeMap<String, BTreeMap<u64, (f64, f64)>> = BTreeMap::new();
    if let (Some(run), Some(ep), Some(agent), Some(metric), Some(value)) =
        (col("run_id"), col("episode"), col("agent"), col("metric"), col("value"))
    {
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.get(metric) != Some("gap") || rec.get(agent) != Some("all") {
                continue;
            }
            let line = i as u64 + 2;
            let e = parse_f64(rec.get(ep), line, "episode")?;
            let v = parse_f64(rec.get(value), line, "value")?;
            let label = arm_label(rec.get(run).unwrap_or_default()).to_string();
            let slot = sums.entry(label).or_default().entry(e.to_bits()).or_insert((0.0, 0.0));
            slot.0 += v;
            slot.1 += 1.0;
        }
    } else if let (Some(ep), Some(series), Some(gap)) = (col("episode"), col("series"), col("gap")) {
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i as u64 + 2;
            let e = parse_f64(rec.get(ep), line, "episode")?;
            let v = parse_f64(rec.get(gap), line, "gap")?;
            let slot = sums
                .entry(rec.get(series).unwrap_or_default().to_string())
                .or_default()
                .entry(e.to_bits())
                .or_insert((0.0, 0.0));
            slot.0 += v;
            slot.1 += 1.0;
        }
    } else {
        return Err(HarnessError::Malformed(
            "expected columns run_id,episode,agent,metric,value or episode,series,gap".into(),
        ));
    }
    Ok(sums
        .into_iter()
        .map(|(name, pts)| {
            let mut v: Vec<(f64, f64)> = pts.into_iter().map(|(e, (s, c))| (f64::from_bits(e), s / c)).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (name, v)
        })
        .collect())
}

/// Trailing moving average over `window` points.
pub fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, _))| {
            let tail = &points[(i + 1).saturating_sub(w)..=i];
            (x, tail.iter().map(|p| p.1).sum::<f64>() / tail.len() as f64)
        })
        .collect()
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn label(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(series: &Series, spec: &PlotSpec) -> String {
    let smoothed: Vec<(&String, Vec<(f64, f64)>)> = series
        .iter()
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(name, pts)| (name, smooth(pts, spec.window)))
        .collect();
    let all = smoothed.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&spec.title)
    );
    let _ = writeln!(
        svg,
        r#"<g stroke="black" fill="none"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"#,
        b = TOP + ph,
        r = LEFT + pw
    );
    for t in ticks(x0, x1) {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(t),
            TOP + ph + 18.0,
            label(t)
        );
    }
    for t in ticks(y0, y1) {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py(t) + 4.0,
            label(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">episode</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    for (idx, (name, pts)) in smoothed.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            coords.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * idx as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Read `csv`, render it and write the SVG to `out`.
pub fn plot_file(csv: &Path, out: &Path, spec: &PlotSpec) -> Result<()> {
    let series = read_series(csv)?;
    let svg = render_svg(&series, spec);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    std::fs::write(out, svg).map_err(|e| HarnessError::io(out, e))
}
