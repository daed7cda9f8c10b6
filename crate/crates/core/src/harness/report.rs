//! Static SVG line charts from trace rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::trace_csv::TraceRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chart {
    /// x: all-params sparsity, y: accuracy.
    AccuracyVsSparsity,
    /// x: round, y: all-params sparsity.
    SparsityVsRound,
}

impl Chart {
    pub fn file_name(self) -> &'static str {
        match self {
            Chart::AccuracyVsSparsity => "sparsity_vs_accuracy.svg",
            Chart::SparsityVsRound => "sparsity_vs_rounds.svg",
        }
    }

    fn labels(self) -> (&'static str, &'static str) {
        match self {
            Chart::AccuracyVsSparsity => ("sparsity (% of all parameters)", "accuracy (%)"),
            Chart::SparsityVsRound => ("pruning round", "sparsity (% of all parameters)"),
        }
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 120.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 48.0;

/// Per-method series, averaged over seeds round by round.
pub fn series(rows: &[TraceRow], chart: Chart) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        let point = match chart {
            Chart::AccuracyVsSparsity => r.accuracy().map(|a| (r.sparsity_all_pct, a)),
            Chart::SparsityVsRound => Some((r.round as f64, r.sparsity_all_pct)),
        };
        if let Some((x, y)) = point {
            let e = acc.entry(r.method.clone()).or_default().entry(r.round).or_insert((0.0, 0.0, 0));
            e.0 += x;
            e.1 += y;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(m, pts)| {
            let v = pts.into_values().map(|(x, y, n)| (x / n as f64, y / n as f64)).collect();
            (m, v)
        })
        .collect()
}

fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let step = 10f64.powf(v.log10().floor());
    (v / step).ceil() * step
}

pub fn render_svg(rows: &[TraceRow], chart: Chart) -> String {
    let data = series(rows, chart);
    let (xlabel, ylabel) = chart.labels();
    let all = data.values().flatten();
    let (x_max, y_max) = match chart {
        Chart::AccuracyVsSparsity => (100.0, 100.0),
        Chart::SparsityVsRound => (nice_max(all.map(|p| p.0).fold(1.0, f64::max)), 100.0),
    };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + pw * x / x_max;
    let sy = |y: f64| TOP + ph * (1.0 - y / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let (xv, yv) = (x_max * i as f64 / 5.0, y_max * i as f64 / 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 16.0,
            trim(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            trim(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{ylabel}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (method, pts)) in data.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-method="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(method),
            points.join(" ")
        );
        let ly = TOP + 16.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 26.0, escape(method));
    }
    s.push_str("</svg>\n");
    s
}

fn trim(v: f64) -> String {
    let t = format!("{v:.1}");
    t.strip_suffix(".0").map(str::to_string).unwrap_or(t)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
