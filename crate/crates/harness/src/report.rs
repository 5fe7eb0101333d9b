//! Merging run directories into one table and drawing their plot data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::manifest::{write_atomic, DirLock, RunManifest, Status};
use crate::output::{read_csv, read_dat, write_csv};
use crate::pipeline::{EvalRow, ANALYSIS_DIR, EVAL_COLUMNS, METRICS_DIR};

/// Plot families and the file-name prefix that feeds each.
pub const FIGURES: [(&str, &str); 6] = [
    ("fig2", "fig2_"),
    ("fig3_left", "fig3_left_"),
    ("fig3_right", "fig3_right_"),
    ("fig9_left", "fig9_left_"),
    ("fig9_right", "fig9_right_"),
    ("fig11", "fig11_"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub rows: Vec<EvalRow>,
    pub table: PathBuf,
    pub charts: Vec<PathBuf>,
}

fn sorted_files(dir: &Path, pred: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|f| f.to_str()).is_some_and(&pred))
        .collect();
    out.sort();
    Ok(out)
}

/// Evaluation rows of one run directory.
pub fn read_run(dir: &Path) -> Result<Vec<EvalRow>> {
    if !dir.is_dir() {
        return Err(HarnessError::Missing(dir.display().to_string()));
    }
    let files = sorted_files(&dir.join(METRICS_DIR), |f| f.starts_with("eval_") && f.ends_with(".csv"))?;
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_csv::<EvalRow>(&f, &EVAL_COLUMNS)?);
    }
    Ok(rows)
}

fn run_name(dir: &Path, index: usize) -> String {
    dir.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("run{index}"))
}

/// Merges `dirs` into `out`: `summary.csv` keyed by strategy, bit widths and
/// seed, plus one SVG chart per plot family present in the inputs.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    if dirs.is_empty() {
        return Err(HarnessError::Config("report needs at least one run directory".into()));
    }
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::new("report", "");
    let result = build(dirs, out, &mut manifest);
    match &result {
        Ok(_) => manifest.status = Status::Ok,
        Err(e) => manifest.error = Some(e.to_string()),
    }
    manifest.write(out)?;
    result
}

fn build(dirs: &[PathBuf], out: &Path, manifest: &mut RunManifest) -> Result<ReportOutcome> {
    let mut rows = Vec::new();
    for d in dirs {
        rows.extend(read_run(d)?);
    }
    rows.sort_by(|a, b| {
        (&a.strategy, a.w_bits, a.a_bits, a.seed).cmp(&(&b.strategy, b.w_bits, b.a_bits, b.seed))
    });
    let table = out.join("summary.csv");
    write_csv(&table, &rows)?;
    manifest.artifacts.push("summary.csv".into());

    let mut charts = Vec::new();
    for (figure, prefix) in FIGURES {
        let mut series = Vec::new();
        let mut labels = (String::from("x"), String::from("y"));
        for (k, d) in dirs.iter().enumerate() {
            for sub in [METRICS_DIR, ANALYSIS_DIR] {
                let files = sorted_files(&d.join(sub), |f| f.starts_with(prefix) && f.ends_with(".dat"))?;
                for f in files {
                    let (l, points) = read_dat(&f)?;
                    labels = l;
                    let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let name = format!("{}/{}", run_name(d, k), stem.trim_start_matches(prefix));
                    series.push(Series { name, points });
                }
            }
        }
        if series.is_empty() {
            continue;
        }
        let path = out.join(format!("{figure}.svg"));
        write_atomic(&path, line_chart(figure, &labels.0, &labels.1, &series).as_bytes())?;
        manifest.artifacts.push(format!("{figure}.svg"));
        charts.push(path);
    }
    manifest.metric("rows", rows.len() as f64);
    Ok(ReportOutcome { rows, table, charts })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// A plain SVG line chart. Non-finite points are left out.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 180.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let finite = series.iter().flat_map(|s| &s.points).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.05 };
        (y0, y1) = (y0 - pad, y1 + pad);
    }
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    s.push_str(&format!(
        "<line x1=\"{L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - B,
        W - R,
        H - B,
        H - B
    ));
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            px(xv),
            H - B + 14.0,
            escape(&format!("{xv:.3}")),
            L - 4.0,
            py(yv) + 3.0,
            escape(&format!("{yv:.3e}"))
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"14\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        (L + W - R) / 2.0,
        H - 12.0,
        escape(x_label),
        (T + H - B) / 2.0,
        (T + H - B) / 2.0,
        escape(y_label)
    ));
    for (k, se) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = se
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = T + 14.0 * k as f64;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"10\">{}</text>\n",
            W - R + 10.0,
            W - R + 30.0,
            W - R + 34.0,
            ly + 3.0,
            escape(&se.name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Rows per `(strategy, w_bits, a_bits)`, handy for printing.
pub fn group_counts(rows: &[EvalRow]) -> BTreeMap<(String, u32, u32), usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry((r.strategy.clone(), r.w_bits, r.a_bits)).or_insert(0) += 1;
    }
    m
}
