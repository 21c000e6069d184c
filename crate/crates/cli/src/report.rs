//! Markdown tables and SVG scatter plots built from result logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};
use tsdesign::harness::{Ablation, RunResult};

/// Keys a report can group rows by before picking the best of each group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupBy {
    Dataset,
    Label,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Markdown,
    Svg,
}

fn key(r: &RunResult, by: GroupBy) -> String {
    match by {
        GroupBy::Dataset => r.dataset.clone(),
        GroupBy::Label => r.label.clone(),
        GroupBy::None => String::new(),
    }
}

fn bold_if(s: String, best: bool) -> String {
    if best {
        format!("**{s}**")
    } else {
        s
    }
}

/// One row per record; the lowest mean MSE and MAE of each group are bold.
pub fn markdown_table(results: &[RunResult], by: GroupBy) -> String {
    let mut best: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in results {
        let e = best.entry(key(r, by)).or_insert((f64::INFINITY, f64::INFINITY));
        e.0 = e.0.min(r.mse.mean);
        e.1 = e.1.min(r.mae.mean);
    }
    let mut rows: Vec<&RunResult> = results.iter().collect();
    rows.sort_by_key(|r| key(r, by));
    let mut out = String::from("| Dataset | Model | MSE | MAE | Batch time (ms) | Parameters |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let (bm, ba) = best[&key(r, by)];
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.2} | {} |",
            r.dataset,
            r.label,
            bold_if(r.mse.to_string(), r.mse.mean == bm),
            bold_if(r.mae.to_string(), r.mae.mean == ba),
            r.batch_time_ms,
            r.param_count
        );
    }
    out
}

/// Paired results with the better arm in bold.
pub fn delta_table(ablations: &[Ablation]) -> String {
    let mut out = String::new();
    if let Some(a) = ablations.first() {
        let _ = writeln!(out, "Axis `{}` (fields: {})\n", a.axis.name(), a.differing.join(", "));
    }
    out.push_str("| Dataset | With | Without | Relative change |\n|---|---|---|---|\n");
    for a in ablations {
        let with_better = a.with.mse.mean <= a.without.mse.mean;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:+.1}% |",
            a.with.dataset,
            bold_if(a.with.mse.to_string(), with_better),
            bold_if(a.without.mse.to_string(), !with_better),
            100.0 * a.relative_delta()
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// MSE against mean batch time, one circle per record with area
/// proportional to the parameter count.
pub fn svg_scatter(results: &[RunResult]) -> Result<String> {
    if results.is_empty() {
        bail!("nothing to plot");
    }
    if let Some(r) = results
        .iter()
        .find(|r| !r.batch_time_ms.is_finite() || !r.mse.mean.is_finite())
    {
        bail!("record {} lacks a finite batch time or MSE", r.label);
    }
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let margin = if hi > lo {
            0.08 * (hi - lo)
        } else {
            lo.abs().max(1e-3) * 0.5
        };
        (lo - margin, hi + margin)
    };
    let (x0, x1) = span(results.iter().map(|r| r.batch_time_ms).collect());
    let (y0, y1) = span(results.iter().map(|r| r.mse.mean).collect());
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let max_params = results.iter().map(|r| r.param_count).max().unwrap_or(1).max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#,
            px(xv),
            h - pad + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            pad - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">mean batch time (ms)</text>"#,
        w / 2.0,
        h - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">test MSE</text>"#,
        h / 2.0
    );
    for r in results {
        let radius = 4.0 + 20.0 * (r.param_count as f64 / max_params).sqrt();
        let (cx, cy) = (px(r.batch_time_ms), py(r.mse.mean));
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="{radius:.1}" fill="steelblue" fill-opacity="0.45" stroke="steelblue"><title>{} ({} parameters)</title></circle>"#,
            escape(&format!("{} on {}", r.label, r.dataset)),
            r.param_count
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{cy:.1}">{}</text>"#,
            cx + radius + 3.0,
            escape(&r.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
