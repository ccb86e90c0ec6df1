//! Static SVG bar charts and a markdown table for metric reports.

use std::fmt::Write as _;

use devgest::metrics::{MetricReport, REGIONS};

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

pub struct Series<'a> {
    pub label: &'a str,
    pub report: &'a MetricReport,
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.4}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart: one group per category, one bar per series. Infinite
/// values are drawn at the top of the axis and labelled `inf`.
pub fn bar_chart(title: &str, categories: &[&str], labels: &[&str], values: &[Vec<f64>]) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let finite_max = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(*v));
    let finite_min = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.min(*v));
    let span = if finite_max - finite_min > 0.0 { finite_max - finite_min } else { 1.0 };
    let y_of = |v: f64| {
        let v = if v.is_infinite() { if v > 0.0 { finite_max } else { finite_min } } else { v };
        top + plot_h * (finite_max - v) / span
    };
    let zero_y = y_of(0.0);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + plot_h);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{zero_y:.2}" x2="{}" y2="{zero_y:.2}" stroke="black"/>"#, left + plot_w);
    for tick in 0..=4 {
        let v = finite_min + span * tick as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, fmt_num(v));
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#dddddd"/>"##, left + plot_w);
    }
    let groups = categories.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bars = labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / bars;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + group_w * ci as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, gx + group_w / 2.0, top + plot_h + 18.0, escape(cat));
        for (si, series) in values.iter().enumerate() {
            let v = series[ci];
            let x = gx + group_w * 0.1 + bar_w * si as f64;
            let y = y_of(v);
            let (y0, hgt) = if y < zero_y { (y, zero_y - y) } else { (zero_y, y - zero_y) };
            let color = PALETTE[si % PALETTE.len()];
            let _ = writeln!(s, r#"<rect x="{x:.2}" y="{y0:.2}" width="{:.2}" height="{hgt:.2}" fill="{color}"/>"#, bar_w * 0.95);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#, x + bar_w / 2.0, y0 - 3.0, fmt_num(v));
        }
    }
    for (si, label) in labels.iter().enumerate() {
        let x = left + 140.0 * si as f64;
        let y = h - 22.0;
        let color = PALETTE[si % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 16.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

/// Chart files `(name, svg)` for a set of reports.
pub fn charts(series: &[Series<'_>]) -> Vec<(String, String)> {
    let labels: Vec<&str> = series.iter().map(|s| s.label).collect();
    let mut out = Vec::new();
    for (metric, title) in [("psnr", "PSNR (dB) by region"), ("ssim", "SSIM by region"), ("lpips", "LPIPS proxy by region")] {
        let values: Vec<Vec<f64>> = series
            .iter()
            .map(|s| {
                REGIONS
                    .iter()
                    .map(|r| {
                        let m = &s.report.regions[*r];
                        match metric {
                            "psnr" => m.psnr,
                            "ssim" => m.ssim,
                            _ => m.lpips,
                        }
                    })
                    .collect()
            })
            .collect();
        out.push((format!("{metric}.svg"), bar_chart(title, &REGIONS, &labels, &values)));
    }
    let set_values: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            let m = &s.report.set_metrics;
            vec![m.fgd, m.div, m.fvd]
        })
        .collect();
    out.push(("set_metrics.svg".into(), bar_chart("Set metrics", &["FGD", "Div", "FVD"], &labels, &set_values)));
    out
}

/// Markdown summary with one row per report.
pub fn markdown_table(series: &[Series<'_>]) -> String {
    let mut s = String::from("| run | FGD | Div | FVD |");
    for r in REGIONS {
        let _ = write!(s, " {r} PSNR | {r} SSIM | {r} LPIPS |");
    }
    s.push('\n');
    s.push_str("|---|---:|---:|---:|");
    for _ in REGIONS {
        s.push_str("---:|---:|---:|");
    }
    s.push('\n');
    for x in series {
        let m = &x.report.set_metrics;
        let _ = write!(s, "| {} | {} | {} | {} |", x.label, fmt_num(m.fgd), fmt_num(m.div), fmt_num(m.fvd));
        for r in REGIONS {
            let g = &x.report.regions[r];
            let _ = write!(s, " {} | {} | {} |", fmt_num(g.psnr), fmt_num(g.ssim), fmt_num(g.lpips));
        }
        s.push('\n');
    }
    if let Some(first) = series.first() {
        s.push_str("\nProvenance:\n\n");
        for (k, v) in &first.report.provenance {
            let _ = writeln!(s, "- {k}: {v}");
        }
    }
    s
}
