//! CSV and SVG output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{bail, Result};
use crate::record::RunRecord;

pub const BASE_COLUMNS: [&str; 7] = ["trial", "phase", "epoch", "train_loss", "test_loss", "train_acc", "test_acc"];

/// `%.9g`-style formatting: 9 significant digits, trailing zeros dropped,
/// scientific notation outside `[1e-4, 1e9)`.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(format_sig).unwrap_or_default()
}

/// Metric columns present in any record, sorted.
pub fn metric_columns(records: &[RunRecord]) -> Vec<String> {
    let set: BTreeSet<&String> = records.iter().flat_map(|r| r.metrics.keys()).collect();
    set.into_iter().cloned().collect()
}

pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    if records.is_empty() {
        bail!(Usage, "no records to write");
    }
    let extra = metric_columns(records);
    let mut out = String::new();
    out.push_str(&BASE_COLUMNS.join(","));
    for c in &extra {
        out.push(',');
        out.push_str(c);
    }
    out.push_str(",seed\n");
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.trial,
            r.phase,
            r.epoch,
            cell(r.train_loss),
            cell(r.test_loss),
            cell(r.train_acc),
            cell(r.test_acc)
        );
        for c in &extra {
            out.push(',');
            out.push_str(&cell(r.metrics.get(c).copied()));
        }
        let _ = writeln!(out, ",{}", r.seed);
    }
    Ok(out)
}

pub fn emit_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let text = records_to_csv(records)?;
    write_file(path, text.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// One line of a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#7f7f7f", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Value range padded so a flat series still gets a visible span.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo > 0.0 {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    }
}

/// Renders a self-contained SVG line chart with axes, tick labels and a
/// legend.
pub fn render_svg(chart: &Chart) -> Result<String> {
    let series: Vec<&Series> = chart.series.iter().filter(|s| !s.points.is_empty()).collect();
    if series.is_empty() {
        bail!(Usage, "chart '{}' has no data", chart.title);
    }
    let points = || series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (x0, x1) = span(points().map(|p| p.0));
    let (y0, y1) = span(points().map(|p| p.1));
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    let _ = writeln!(s, r#"<g class="ticks" font-family="sans-serif" font-size="11">"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            escape(&short(xv))
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            escape(&short(yv))
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&chart.y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn short(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        trim_zeros(&format!("{v:.3}"))
    }
}

pub fn emit_plot(chart: &Chart, path: &Path) -> Result<()> {
    let svg = render_svg(chart)?;
    write_file(path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Phase;

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(0.1), "0.1");
        assert_eq!(format_sig(2.302585092994046), "2.30258509");
        assert_eq!(format_sig(123456789.0), "123456789");
        assert_eq!(format_sig(1234567890.0), "1.23456789e9");
        assert_eq!(format_sig(0.000012345), "1.2345e-5");
        assert_eq!(format_sig(0.00012345), "0.00012345");
        assert_eq!(format_sig(1.5e-7), "1.5e-7");
        assert_eq!(format_sig(-0.5), "-0.5");
        assert_eq!(format_sig(9.9999999999), "10");
    }

    #[test]
    fn absent_values_are_empty_cells() {
        let mut r = RunRecord::new(Phase::Pretrain, 1);
        r.train_loss = Some(2.5);
        let mut r2 = RunRecord::new(Phase::Train, 1);
        r2.metrics.insert("angle_l1".into(), 80.0);
        let csv = records_to_csv(&[r, r2]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "trial,phase,epoch,train_loss,test_loss,train_acc,test_acc,angle_l1,seed");
        assert_eq!(lines[1], "0,pretrain,1,2.5,,,,,0");
        assert_eq!(lines[2], "0,train,1,,,,,80,0");
        assert!(records_to_csv(&[]).is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let chart = Chart {
            title: "a < b".into(),
            x_label: "epoch".into(),
            y_label: "acc".into(),
            series: vec![
                Series { label: "fa".into(), points: vec![(1.0, 0.5), (2.0, 0.7)] },
                Series { label: "bp".into(), points: vec![(1.0, 0.6), (2.0, 0.6)] },
            ],
        };
        let svg = render_svg(&chart).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt; b"));
        let empty = Chart { series: vec![], ..chart };
        assert!(render_svg(&empty).is_err());
    }
}
