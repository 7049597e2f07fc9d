//! Method comparison tables: one row per run, columns Dice, Jaccard, HD and
//! ASSD, rendered as CSV and markdown.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::numeric;

/// File suffix of per-case evaluation reports inside a run directory.
pub const REPORT_SUFFIX: &str = ".report.json";

pub const CSV_HEADER: &str = "method,Dice,Jaccard,HD,ASSD";
const MISSING: &str = "NA";

/// Case-averaged macro metrics of one method. Overlaps are fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub cases: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| numeric::sum(v.iter().copied()) / v.len() as f64)
}

impl MethodRow {
    /// Mean over cases of each case's macro average; cases where a metric is
    /// absent do not count toward that metric.
    pub fn from_reports(method: &str, reports: &[MetricsReport]) -> MethodRow {
        let m = |f: fn(&MetricsReport) -> Option<f64>| mean(reports.iter().map(f));
        MethodRow {
            method: method.to_string(),
            dice: m(|r| r.macro_avg.dice),
            jaccard: m(|r| r.macro_avg.jaccard),
            hd_mm: m(|r| r.macro_avg.hd_mm),
            assd_mm: m(|r| r.macro_avg.assd_mm),
            hd95_mm: m(|r| r.macro_avg.hd95_mm),
            cases: reports.len(),
        }
    }
}

fn fmt2(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| format!("{v:.2}"))
}

fn pct(v: Option<f64>) -> String {
    fmt2(v.map(|v| 100.0 * v))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub rows: Vec<MethodRow>,
    /// Adds an HD95 column after ASSD.
    pub hd95: bool,
}

impl Summary {
    pub fn new(rows: Vec<MethodRow>) -> Summary {
        Summary { rows, hd95: false }
    }

    fn cells(&self, r: &MethodRow) -> Vec<String> {
        let mut c = vec![pct(r.dice), pct(r.jaccard), fmt2(r.hd_mm), fmt2(r.assd_mm)];
        if self.hd95 {
            c.push(fmt2(r.hd95_mm));
        }
        c
    }

    /// Dice and Jaccard in percent, distances in mm, two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        if self.hd95 {
            s.push_str(",HD95");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.method, self.cells(r).join(","));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut head = vec!["Method", "Dice (%)", "Jaccard (%)", "HD (mm)", "ASSD (mm)"];
        if self.hd95 {
            head.push("HD95 (mm)");
        }
        let mut s = format!("| {} |\n|---|", head.join(" | "));
        s.push_str(&"---:|".repeat(head.len() - 1));
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} |", r.method, self.cells(r).join(" | "));
        }
        s
    }
}

/// Published results used as static reference content.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub block: &'static str,
    pub method: &'static str,
    pub dice_pct: f64,
    pub jaccard_pct: f64,
    pub hd_mm: f64,
    pub assd_mm: f64,
}

const fn row(block: &'static str, method: &'static str, v: [f64; 4]) -> ReferenceRow {
    ReferenceRow {
        block,
        method,
        dice_pct: v[0],
        jaccard_pct: v[1],
        hd_mm: v[2],
        assd_mm: v[3],
    }
}

const MM_LOSS: &str = "MM-WHS CT, 64³, shape-aware losses";
const MM_ARCH64: &str = "MM-WHS CT, 64³, architectural priors";
const MM_ARCH128: &str = "MM-WHS CT, 128³, architectural priors";
const WHS_LOSS: &str = "WHS++ CT, 64³, shape-aware losses";
const WHS_ARCH: &str = "WHS++ CT, 64³, architectural priors";

/// Full-scale 3D U-Net results. Not reproducible here; kept for side-by-side display.
pub const REFERENCE_TABLE: [ReferenceRow; 20] = [
    row(MM_LOSS, "Baseline", [90.85, 83.63, 7.64, 1.03]),
    row(MM_LOSS, "Volume regularization", [90.85, 83.62, 7.70, 1.04]),
    row(MM_LOSS, "Moment regularization", [90.84, 83.60, 7.67, 1.03]),
    row(MM_LOSS, "Anatomical relation", [88.98, 80.65, 8.23, 1.27]),
    row(MM_ARCH64, "Baseline", [90.85, 83.63, 7.64, 1.03]),
    row(MM_ARCH64, "HM multilayer", [90.60, 83.23, 7.78, 1.06]),
    row(MM_ARCH64, "2-Decoder", [90.73, 83.43, 7.58, 1.06]),
    row(MM_ARCH64, "Cascaded", [90.32, 82.74, 7.55, 1.08]),
    row(MM_ARCH128, "Baseline", [92.05, 85.78, 7.35, 0.88]),
    row(MM_ARCH128, "HM multilayer", [91.80, 85.38, 7.28, 0.90]),
    row(MM_ARCH128, "2-Encoder", [92.02, 85.70, 7.40, 0.89]),
    row(MM_ARCH128, "Cascaded", [92.04, 85.70, 7.26, 0.89]),
    row(WHS_LOSS, "Baseline", [88.93, 81.01, 18.47, 1.68]),
    row(WHS_LOSS, "Volume regularization", [89.09, 81.26, 17.91, 1.63]),
    row(WHS_LOSS, "Moment regularization", [89.16, 81.47, 18.31, 1.61]),
    row(WHS_LOSS, "Anatomical relation", [88.66, 80.67, 18.13, 1.70]),
    row(WHS_ARCH, "Baseline", [88.93, 81.01, 18.47, 1.68]),
    row(WHS_ARCH, "HM multilayer", [88.72, 80.63, 20.88, 1.73]),
    row(WHS_ARCH, "2-Encoder", [87.75, 79.43, 18.52, 1.77]),
    row(WHS_ARCH, "Cascaded", [86.13, 77.05, 21.27, 2.09]),
];

/// The shape-aware loss block on MM-WHS at 64³, as markdown.
pub fn reference_markdown() -> String {
    let mut s = format!("Reference ({MM_LOSS}):\n\n");
    s.push_str("| Method | Dice (%) | Jaccard (%) | HD (mm) | ASSD (mm) |\n|---|---:|---:|---:|---:|\n");
    for r in REFERENCE_TABLE.iter().filter(|r| r.block == MM_LOSS) {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.method, r.dice_pct, r.jaccard_pct, r.hd_mm, r.assd_mm
        );
    }
    s
}

/// Per-case reports of a run directory, ordered by file name.
pub fn load_run(dir: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    run_files(dir)?.iter().map(MetricsReport::load).collect()
}

/// The `*.report.json` files of a run directory, sorted.
pub fn run_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_report = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(REPORT_SUFFIX));
        if is_report && path.is_file() {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::InvalidDocument(format!(
            "no *{REPORT_SUFFIX} files in {}",
            dir.display()
        )));
    }
    paths.sort();
    Ok(paths)
}

/// Method name of a run directory: its last path component.
pub fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}
