use crate::error::{invalid, Result};
use crate::image::ClassId;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const PER_CLASS_CSV: &str = "per_class.csv";

/// Grouped scores after one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub old: f64,
    pub new: Option<f64>,
    pub all: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub protocol: String,
    pub mode: String,
    pub seed: u64,
    pub include_background: bool,
    pub per_class_iou: Vec<(ClassId, Option<f64>)>,
    /// Initial classes `C_0` (plus background when included).
    pub old: f64,
    /// Classes added after step 0; absent for single-step protocols.
    pub new: Option<f64>,
    pub all: f64,
    pub delta: Option<f64>,
    pub excluded: Vec<ClassId>,
    pub trace: Vec<StepMetrics>,
    pub config_fingerprint: String,
    /// Wall time; printed but never written to CSV so reports stay
    /// byte-stable.
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub protocol: String,
    pub mode: String,
    pub seed: u64,
    pub group: String,
    pub miou: Option<f64>,
    pub delta: Option<f64>,
    pub background_included: bool,
    pub excluded: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PerClassRow {
    method: String,
    protocol: String,
    mode: String,
    seed: u64,
    class: ClassId,
    iou: Option<f64>,
}

impl MetricsReport {
    /// One row per group: old, new, all.
    pub fn rows(&self) -> Vec<ReportRow> {
        let excluded = self
            .excluded
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        [("old", Some(self.old)), ("new", self.new), ("all", Some(self.all))]
            .into_iter()
            .map(|(group, miou)| ReportRow {
                method: self.method.clone(),
                protocol: self.protocol.clone(),
                mode: self.mode.clone(),
                seed: self.seed,
                group: group.to_string(),
                miou,
                delta: self.delta,
                background_included: self.include_background,
                excluded: excluded.clone(),
                fingerprint: self.config_fingerprint.clone(),
            })
            .collect()
    }
}

pub fn write_rows_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Into::into)).collect()
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.1}", v * 100.0)).unwrap_or_else(|| "-".to_string())
}

/// Aligned text table with one line per (method, protocol, mode, seed) and
/// old / new / all / Δ columns in mIoU points.
pub fn text_table(rows: &[ReportRow]) -> String {
    type Key = (String, String, String, u64);
    let mut keys: Vec<Key> = Vec::new();
    let mut cells: Vec<[Option<f64>; 4]> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.protocol.clone(), r.mode.clone(), r.seed);
        let i = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                cells.push([None; 4]);
                keys.len() - 1
            }
        };
        let col = match r.group.as_str() {
            "old" => 0,
            "new" => 1,
            _ => 2,
        };
        cells[i][col] = r.miou;
        cells[i][3] = r.delta;
    }
    let header = ["method", "protocol", "mode", "seed", "old", "new", "all", "delta"];
    let body: Vec<Vec<String>> = keys
        .iter()
        .zip(&cells)
        .map(|((m, p, mode, s), c)| {
            vec![
                m.clone(),
                p.clone(),
                mode.clone(),
                s.to_string(),
                pct(c[0]),
                pct(c[1]),
                pct(c[2]),
                pct(c[3]),
            ]
        })
        .collect();
    align(&header.map(String::from), &body)
}

fn align(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule);
    for row in body {
        line(&mut out, row);
    }
    out
}

/// Writes `metrics.csv`, `per_class.csv` and `metrics.txt` into `dir`.
pub fn emit_report(reports: &[MetricsReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(invalid("no reports to emit"));
    }
    fs::create_dir_all(dir)?;
    let rows: Vec<ReportRow> = reports.iter().flat_map(MetricsReport::rows).collect();
    let csv_path = dir.join(METRICS_CSV);
    write_rows_csv(&csv_path, &rows)?;

    let per_class_path = dir.join(PER_CLASS_CSV);
    let mut w = csv::Writer::from_path(&per_class_path)?;
    for r in reports {
        for &(class, iou) in &r.per_class_iou {
            w.serialize(PerClassRow {
                method: r.method.clone(),
                protocol: r.protocol.clone(),
                mode: r.mode.clone(),
                seed: r.seed,
                class,
                iou,
            })?;
        }
    }
    w.flush()?;

    let txt_path = dir.join(METRICS_TXT);
    fs::write(&txt_path, text_table(&rows))?;
    Ok(vec![csv_path, per_class_path, txt_path])
}

/// One configuration of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub toggles: Vec<(String, String)>,
    pub old: f64,
    pub new: Option<f64>,
    pub all: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut header: Vec<String> = first.toggles.iter().map(|(k, _)| k.clone()).collect();
    header.extend(["old", "new", "all"].map(String::from));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells: Vec<String> = r.toggles.iter().map(|(_, v)| v.clone()).collect();
            cells.extend([pct(Some(r.old)), pct(r.new), pct(Some(r.all))]);
            cells
        })
        .collect();
    align(&header, &body)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = rows.first() {
        let mut header: Vec<&str> = first.toggles.iter().map(|(k, _)| k.as_str()).collect();
        header.extend(["old", "new", "all"]);
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec: Vec<String> = r.toggles.iter().map(|(_, v)| v.clone()).collect();
        rec.push(r.old.to_string());
        rec.push(r.new.map(|v| v.to_string()).unwrap_or_default());
        rec.push(r.all.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
