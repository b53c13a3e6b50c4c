//! Report files: full JSON, CSV tables on the percentage scale, SVG robustness curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{Aggregate, ExperimentReport, Setting, SettingResult};

/// Scaled value for tables: metrics are reported as percentages.
pub fn scaled(v: Option<f64>) -> String {
    v.map(|x| format!("{}", x * 100.0)).unwrap_or_default()
}

fn agg_cells(a: &Aggregate) -> [String; 3] {
    [scaled(a.mean), scaled(a.se), a.n.to_string()]
}

/// One row per setting with mean, standard error and count for each metric.
pub fn metrics_table(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "setting,repetitions,auc_mean,auc_se,auc_n,gmean_mean,gmean_se,gmean_n,mcc_mean,mcc_se,mcc_n\n",
    );
    for e in &report.settings {
        let a = &e.result.aggregate;
        let cells: Vec<String> = [&a.auc, &a.gmean, &a.mcc].iter().flat_map(|m| agg_cells(m)).collect();
        let _ = writeln!(out, "{},{},{}", e.setting, e.result.repetitions, cells.join(","));
    }
    out
}

/// Per-density-grade metrics for the settings that have an ACR breakdown.
pub fn density_table(report: &ExperimentReport) -> String {
    let mut out = String::from("setting,acr,records,malignant,benign,auc,gmean,mcc\n");
    for r in &report.acr {
        for c in &r.cells {
            let m = c.metrics.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.setting,
                c.acr.code().unwrap_or(""),
                c.records,
                c.malignant,
                c.benign,
                scaled(m.and_then(|m| m.auc)),
                scaled(m.map(|m| m.gmean)),
                scaled(m.and_then(|m| m.mcc)),
            );
        }
    }
    out
}

/// Points of the robustness curves: `(family, n, result)`, with the F
/// baseline repeated at every percentage of the sweep.
pub fn robustness_points(report: &ExperimentReport) -> Vec<(&'static str, u8, &SettingResult)> {
    let mut percentages: Vec<u8> = report
        .settings
        .iter()
        .filter_map(|e| match e.setting {
            Setting::Cstar(n) | Setting::FplusCstar(n) => Some(n),
            _ => None,
        })
        .collect();
    percentages.sort_unstable();
    percentages.dedup();
    let mut out = Vec::new();
    if let Some(f) = report.setting(Setting::F) {
        out.extend(percentages.iter().map(|&n| ("F", n, f)));
    }
    for family in ["Cstar", "FplusCstar"] {
        for &n in &percentages {
            let s = if family == "Cstar" { Setting::Cstar(n) } else { Setting::FplusCstar(n) };
            if let Some(r) = report.setting(s) {
                out.push((family, n, r));
            }
        }
    }
    out
}

pub fn robustness_table(report: &ExperimentReport) -> String {
    let mut out =
        String::from("n,setting,repetitions,auc_mean,auc_se,gmean_mean,gmean_se,mcc_mean,mcc_se\n");
    for (family, n, r) in robustness_points(report) {
        let a = &r.aggregate;
        let _ = writeln!(
            out,
            "{n},{family},{},{},{},{},{},{},{}",
            r.repetitions,
            scaled(a.auc.mean),
            scaled(a.auc.se),
            scaled(a.gmean.mean),
            scaled(a.gmean.se),
            scaled(a.mcc.mean),
            scaled(a.mcc.se),
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotMetric {
    Auc,
    Gmean,
    Mcc,
}

impl PlotMetric {
    pub const ALL: [PlotMetric; 3] = [PlotMetric::Auc, PlotMetric::Gmean, PlotMetric::Mcc];

    pub fn name(self) -> &'static str {
        match self {
            PlotMetric::Auc => "auc",
            PlotMetric::Gmean => "gmean",
            PlotMetric::Mcc => "mcc",
        }
    }

    fn pick(self, r: &SettingResult) -> &Aggregate {
        match self {
            PlotMetric::Auc => &r.aggregate.auc,
            PlotMetric::Gmean => &r.aggregate.gmean,
            PlotMetric::Mcc => &r.aggregate.mcc,
        }
    }

    fn y_range(self) -> (f64, f64) {
        match self {
            PlotMetric::Mcc => (-100.0, 100.0),
            _ => (0.0, 100.0),
        }
    }
}

const SERIES_COLORS: [(&str, &str); 3] = [("F", "#555555"), ("Cstar", "#1f77b4"), ("FplusCstar", "#d62728")];

/// Metric-versus-percentage curves with standard-error bars, one series per
/// setting family and one marker per percentage.
pub fn robustness_svg(report: &ExperimentReport, metric: PlotMetric) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 130.0, 30.0, 50.0);
    let (y_lo, y_hi) = metric.y_range();
    let px = |n: f64| left + n / 100.0 * (w - left - right);
    let py = |v: f64| top + (y_hi - v.clamp(y_lo, y_hi)) / (y_hi - y_lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{} vs. synthetic CESM share</text>"#,
        (left + w - right) / 2.0,
        metric.name().to_uppercase()
    );
    // axes and ticks
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/></g>"#,
        l = left,
        r = w - right,
        t = top,
        b = h - bottom
    );
    for i in 0..=10 {
        let n = f64::from(i) * 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{n}</text>"#,
            px(n),
            h - bottom + 15.0
        );
    }
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * f64::from(i) / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{v}</text>"#,
            left - 6.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">n (% of test patients with synthetic CESM)</text>"#,
        (left + w - right) / 2.0,
        h - 12.0
    );

    let points = robustness_points(report);
    for (li, (family, color)) in SERIES_COLORS.iter().enumerate() {
        let series: Vec<(u8, &Aggregate)> = points
            .iter()
            .filter(|p| p.0 == *family)
            .map(|p| (p.1, metric.pick(p.2)))
            .collect();
        if series.is_empty() {
            continue;
        }
        let _ = writeln!(s, r#"<g class="series" data-setting="{family}" stroke="{color}" fill="{color}">"#);
        let line: Vec<String> = series
            .iter()
            .filter_map(|(n, a)| a.mean.map(|m| format!("{},{}", px(f64::from(*n)), py(m * 100.0))))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" points="{}"/>"#, line.join(" "));
        for (n, a) in &series {
            let x = px(f64::from(*n));
            match a.mean {
                Some(m) => {
                    let (m, se) = (m * 100.0, a.se.unwrap_or(0.0) * 100.0);
                    let _ = writeln!(
                        s,
                        r#"<line class="error" x1="{x}" y1="{}" x2="{x}" y2="{}"/>"#,
                        py(m - se),
                        py(m + se)
                    );
                    let _ = writeln!(
                        s,
                        r#"<circle class="point" data-n="{n}" data-value="{m}" cx="{x}" cy="{}" r="3"/>"#,
                        py(m)
                    );
                }
                None => {
                    let _ = writeln!(s, r#"<circle class="point missing" data-n="{n}" cx="{x}" cy="{}" r="3" fill="none"/>"#, py(y_lo));
                }
            }
        }
        let ly = top + 20.0 * li as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" stroke="none">{family}</text>"#,
            w - right + 15.0,
            ly + 4.0
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `tables/*.csv` and, when the report holds a
/// robustness sweep, `plots/robustness_*.svg`. Returns the written paths.
pub fn write_report(report: &ExperimentReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        (out.join("report.json"), report.to_json()),
        (out.join("tables/metrics.csv"), metrics_table(report)),
        (out.join("tables/density.csv"), density_table(report)),
    ];
    let has_sweep = report.settings.iter().any(|e| e.setting.is_starred());
    if has_sweep {
        files.push((out.join("tables/robustness.csv"), robustness_table(report)));
        for m in PlotMetric::ALL {
            files.push((
                out.join(format!("plots/robustness_{}.svg", m.name())),
                robustness_svg(report, m),
            ));
        }
    }
    for (path, text) in &files {
        write(path, text)?;
    }
    Ok(files.into_iter().map(|f| f.0).collect())
}
