//! Static SVG plots: log-log ROC curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attack::AttackResult;
use crate::error::Result;
use crate::metrics::{self, RocCurve};

#[derive(Debug, Clone)]
pub struct RocSeries {
    pub label: String,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Drawn solid when set, dashed otherwise.
    pub solid: bool,
}

impl RocSeries {
    pub fn from_curve(label: impl Into<String>, curve: &RocCurve, solid: bool) -> Self {
        RocSeries {
            label: label.into(),
            fpr: curve.fpr(),
            tpr: curve.tpr(),
            solid,
        }
    }
}

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn fmt_tick(v: f64) -> String {
    let e = v.log10().round() as i32;
    if e >= 0 {
        "1".to_string()
    } else {
        format!("1e{e}")
    }
}

/// Log-log ROC plot over `[floor, 1]` on both axes; zero rates are drawn at `floor`.
pub fn roc_svg(title: &str, series: &[RocSeries], floor: f64) -> String {
    let floor = floor.clamp(1e-9, 0.5);
    let lmin = floor.log10();
    let span = -lmin;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + (v.max(floor).log10() - lmin) / span * plot_w;
    let py = |v: f64| HEIGHT - MARGIN - (v.max(floor).log10() - lmin) / span * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    let mut decade = 1.0;
    while decade >= floor * (1.0 - 1e-9) {
        let (x, y) = (px(decade), py(decade));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/>"##,
            HEIGHT - MARGIN
        );
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##,
            WIDTH - MARGIN
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            HEIGHT - MARGIN + 16.0,
            fmt_tick(decade)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            MARGIN - 6.0,
            y + 4.0,
            fmt_tick(decade)
        );
        decade /= 10.0;
    }
    let _ = writeln!(
        s,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="2,3"/>"##,
        px(floor),
        py(floor),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">False positive rate</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">True positive rate</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if ser.solid {
            ""
        } else {
            r#" stroke-dasharray="6,4""#
        };
        let pts: Vec<String> = ser
            .fpr
            .iter()
            .zip(&ser.tpr)
            .map(|(&f, &t)| format!("{:.2},{:.2}", px(f), py(t)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="roc" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            escape(&ser.label),
            pts.join(" ")
        );
        let ly = MARGIN + 16.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN - 130.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            lx + 24.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One curve per evaluable group of a single attack result; spurious groups solid.
pub fn group_roc_svg(
    title: &str,
    result: &AttackResult,
    spurious: &BTreeMap<u32, bool>,
) -> Result<String> {
    let mut by_group: BTreeMap<u32, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for e in &result.entries {
        let v = by_group.entry(e.group_id).or_default();
        v.0.push(e.score);
        v.1.push(e.is_member);
    }
    let mut series = Vec::new();
    let mut floor: f64 = 1.0;
    for (g, (s, m)) in &by_group {
        if !(m.iter().any(|x| *x) && m.iter().any(|x| !*x)) {
            continue;
        }
        let curve = metrics::roc_curve(s, m)?;
        floor = floor.min(1.0 / curve.n_nonmembers as f64);
        let is_spurious = spurious.get(g).copied().unwrap_or(false);
        let label = format!("g{g}{}", if is_spurious { " (spurious)" } else { "" });
        series.push(RocSeries::from_curve(label, &curve, is_spurious));
    }
    Ok(roc_svg(title, &series, floor))
}

/// One total-population curve per attack result.
pub fn target_roc_svg(title: &str, results: &[AttackResult]) -> Result<String> {
    let mut series = Vec::new();
    let mut floor: f64 = 1.0;
    for r in results {
        let (s, m): (Vec<f64>, Vec<bool>) =
            r.entries.iter().map(|e| (e.score, e.is_member)).unzip();
        let curve = metrics::roc_curve(&s, &m)?;
        floor = floor.min(1.0 / curve.n_nonmembers as f64);
        series.push(RocSeries::from_curve(
            format!("target {}", r.target_id),
            &curve,
            true,
        ));
    }
    Ok(roc_svg(title, &series, floor))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series_with_dash_convention() {
        let series = vec![
            RocSeries {
                label: "g0".into(),
                fpr: vec![0.0, 0.5, 1.0],
                tpr: vec![0.0, 0.7, 1.0],
                solid: false,
            },
            RocSeries {
                label: "g1 <spurious>".into(),
                fpr: vec![0.0, 0.1, 1.0],
                tpr: vec![0.2, 0.9, 1.0],
                solid: true,
            },
        ];
        let svg = roc_svg("test", &series, 1e-3);
        assert_eq!(svg.matches("<polyline").count(), 2);
        let lines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
        assert!(lines[0].contains("stroke-dasharray"));
        assert!(!lines[1].contains("stroke-dasharray"));
        assert!(svg.contains("&lt;spurious&gt;"));
        assert_eq!(svg, roc_svg("test", &series, 1e-3));
    }
}
