//! Report files: per-cell metrics, per-method summary and the accuracy-vs-shots chart.

use std::fmt::Write as _;
use std::path::Path;

use dafkit::fewshot::ExperimentReport;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const REPORT_JSON: &str = "report.json";

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Input(format!("CSV encoding failed: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Input(format!("CSV encoding failed: {e}")))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(report: &ExperimentReport) -> CliResult<Vec<u8>> {
    let rows = report
        .cells
        .iter()
        .map(|c| {
            vec![
                report.dataset.clone(),
                c.method.clone(),
                c.q.to_string(),
                c.trial.to_string(),
                opt(c.accuracy),
                opt(c.steps_to_best),
            ]
        })
        .collect();
    csv_bytes(&["dataset", "method", "q", "trial", "accuracy", "steps_to_best"], rows)
}

pub fn summary_csv(report: &ExperimentReport) -> CliResult<Vec<u8>> {
    let rows = report
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.method.clone(),
                opt(s.auc),
                opt(s.auc_ci_low),
                opt(s.auc_ci_high),
                opt(s.normalized_score),
            ]
        })
        .collect();
    csv_bytes(&["method", "auc", "auc_ci_low", "auc_ci_high", "normalized_score"], rows)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Mean accuracy against `log2 q` per method, with shaded 68% bands.
pub fn curves_svg(report: &ExperimentReport) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 180.0, 30.0, 50.0);
    let qs: Vec<f64> = report.q_grid.iter().map(|&q| (q as f64).log2()).collect();
    let (x0, x1) = match (qs.first(), qs.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 0.5, a + 0.5),
        _ => (0.0, 1.0),
    };
    let points = report.summaries.iter().flat_map(|s| s.curve.iter());
    let (mut y0, mut y1) = points.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.ci_low), hi.max(p.ci_high))
    });
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.1).max(0.01);
    let (y0, y1) = ((y0 - pad).max(0.0), (y1 + pad).min(1.0));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0).max(1e-9) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, (w - right + left) / 2.0, report.dataset);
    let (ax, ay) = (px(x0), py(y0));
    let _ = writeln!(s, r#"<line x1="{ax}" y1="{ay}" x2="{}" y2="{ay}" stroke="black"/>"#, px(x1));
    let _ = writeln!(s, r#"<line x1="{ax}" y1="{ay}" x2="{ax}" y2="{}" stroke="black"/>"#, py(y1));
    for (q, x) in report.q_grid.iter().zip(&qs) {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{q}</text>"#, px(*x), ay + 18.0);
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, ax - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">examples per class</text>"#, (ax + px(x1)) / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">validation accuracy</text>"#, h / 2.0, h / 2.0);

    for (k, summary) in report.summaries.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, &dafkit::fewshot::CurvePoint)> =
            summary.curve.iter().map(|p| ((p.q as f64).log2(), p)).collect();
        if pts.is_empty() {
            continue;
        }
        let band: Vec<String> = pts
            .iter()
            .map(|(x, p)| format!("{:.1},{:.1}", px(*x), py(p.ci_high)))
            .chain(pts.iter().rev().map(|(x, p)| format!("{:.1},{:.1}", px(*x), py(p.ci_low))))
            .collect();
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = pts.iter().map(|(x, p)| format!("{:.1},{:.1}", px(*x), py(p.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 20.0 * k as f64;
        let lx = w - right + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, summary.method);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.json`, `metrics.csv`, `summary.csv` and `curves.svg` into `out/dir`.
/// A chart that cannot be written is reported on stderr and otherwise ignored.
pub fn write_report(report: &ExperimentReport, out: &Path, dir: &str, manifest: &mut RunManifest) -> CliResult<()> {
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    manifest.output(out, format!("{dir}/{REPORT_JSON}"), &json)?;
    manifest.output(out, format!("{dir}/metrics.csv"), &metrics_csv(report)?)?;
    manifest.output(out, format!("{dir}/summary.csv"), &summary_csv(report)?)?;
    if let Err(e) = manifest.output(out, format!("{dir}/curves.svg"), curves_svg(report).as_bytes()) {
        eprintln!("warning: chart not written: {e}");
    }
    Ok(())
}
