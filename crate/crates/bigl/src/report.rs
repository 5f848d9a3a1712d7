//! Report emission and comparison: aligned text tables, a machine-readable
//! per-metric record stream, a JSON round-trip of the full report, and
//! side-by-side comparison of several runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{BiglError, Result};
use crate::metrics::{MetricsReport, RegionMetrics, RegionSpec};

pub const METRIC_NAMES: [&str; 3] = ["dsc", "hd95", "asd"];

/// One machine-readable line: a single metric value of one case and region.
/// `value` is null when the metric is undefined for that case (empty mask on
/// one side).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub case_id: String,
    pub region: String,
    pub metric: String,
    pub value: Option<f64>,
}

/// Flatten a report into one record per case, region and metric.
pub fn to_records(report: &MetricsReport) -> Vec<MetricRecord> {
    let mut out = Vec::with_capacity(report.per_case.len() * METRIC_NAMES.len());
    for row in &report.per_case {
        for (metric, value) in [("dsc", Some(row.dsc)), ("hd95", row.hd95), ("asd", row.asd)] {
            out.push(MetricRecord {
                case_id: row.case_id.clone(),
                region: row.region.clone(),
                metric: metric.to_string(),
                value,
            });
        }
    }
    out
}

pub fn records_to_jsonl(records: &[MetricRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Parse a record stream back into per-case rows. Strict: malformed JSON,
/// unknown metric names, duplicate or incomplete (missing dice) groups are
/// rejected.
pub fn parse_records_jsonl(text: &str) -> Result<Vec<RegionMetrics>> {
    use std::collections::BTreeMap;
    let bad = |msg: String| BiglError::IngestError(format!("metric records: {msg}"));
    let mut groups: BTreeMap<(String, String), [Option<Option<f64>>; 3]> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(line)
            .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        let slot = METRIC_NAMES
            .iter()
            .position(|m| *m == rec.metric)
            .ok_or_else(|| bad(format!("line {}: unknown metric {:?}", lineno + 1, rec.metric)))?;
        if rec.metric == "dsc" {
            match rec.value {
                Some(v) if v.is_finite() && (0.0..=1.0).contains(&v) => {}
                _ => {
                    return Err(bad(format!(
                        "line {}: dice must be a finite value in [0, 1]",
                        lineno + 1
                    )))
                }
            }
        } else if let Some(v) = rec.value {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!(
                    "line {}: distances must be finite and non-negative",
                    lineno + 1
                )));
            }
        }
        let entry = groups.entry((rec.case_id, rec.region)).or_default();
        if entry[slot].is_some() {
            return Err(bad(format!("line {}: duplicate metric for its case and region", lineno + 1)));
        }
        entry[slot] = Some(rec.value);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((case_id, region), slots) in groups {
        let [dsc, hd95, asd] = slots;
        let dsc = dsc
            .flatten()
            .ok_or_else(|| bad(format!("case {case_id} region {region}: missing dice record")))?;
        rows.push(RegionMetrics {
            case_id,
            region,
            dsc,
            hd95: hd95.flatten(),
            asd: asd.flatten(),
        });
    }
    Ok(rows)
}

/// Re-aggregate parsed records under the report's own region order.
pub fn report_from_records(region_names: &[String], rows: Vec<RegionMetrics>) -> MetricsReport {
    let specs: Vec<RegionSpec> =
        region_names.iter().map(|n| RegionSpec::new(n, &[])).collect();
    MetricsReport::from_rows(&specs, rows)
}

const METRIC_HEADS: [(&str, &str); 3] = [("dsc", "DSC (%)"), ("hd95", "HD95 (mm)"), ("asd", "ASD (mm)")];

fn pad(s: &str, width: usize) -> String {
    format!("{s:<width$}")
}

/// Aligned text table of one report: regions as rows, metrics as columns,
/// with the excluded distance rows footnoted.
pub fn render_table(title: &str, report: &MetricsReport) -> String {
    let mut widths = vec![report.regions.iter().map(|r| r.len()).max().unwrap_or(6).max(6)];
    let mut header = vec!["region".to_string()];
    for (_, head) in METRIC_HEADS {
        header.push(head.to_string());
    }
    let cells: Vec<Vec<String>> = report
        .regions
        .iter()
        .map(|r| {
            METRIC_HEADS.iter().map(|(m, _)| report.cell(r, m)).collect()
        })
        .collect();
    for c in 0..METRIC_HEADS.len() {
        let w = cells
            .iter()
            .map(|row| row[c].len())
            .chain([header[c + 1].len()])
            .max()
            .unwrap_or(8);
        widths.push(w);
    }
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    out.push_str(&format!("cases: {}\n", report.n_cases));
    let line: Vec<String> =
        header.iter().enumerate().map(|(i, h)| pad(h, widths[i])).collect();
    out.push_str(&line.join("  "));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for (r, region) in report.regions.iter().enumerate() {
        let mut row = vec![pad(region, widths[0])];
        for (c, cell) in cells[r].iter().enumerate() {
            row.push(pad(cell, widths[c + 1]));
        }
        out.push_str(row.join("  ").trim_end());
        out.push('\n');
    }
    if !report.undefined_cases.is_empty() {
        out.push_str("excluded from distance aggregation:\n");
        for (case, region, reason) in &report.undefined_cases {
            out.push_str(&format!("  {case} {region}: {reason}\n"));
        }
    }
    out
}

/// Write the three evaluation artifacts into `dir`: `table.txt`,
/// `records.jsonl` and `report.json`.
pub fn write_report_files(
    title: &str,
    report: &MetricsReport,
    dir: &Path,
) -> Result<[PathBuf; 3]> {
    std::fs::create_dir_all(dir).map_err(BiglError::Io)?;
    let table = dir.join("table.txt");
    std::fs::write(&table, render_table(title, report)).map_err(BiglError::Io)?;
    let records = dir.join("records.jsonl");
    std::fs::write(&records, records_to_jsonl(&to_records(report))).map_err(BiglError::Io)?;
    let json = dir.join("report.json");
    let body = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json, body).map_err(BiglError::Io)?;
    Ok([table, records, json])
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BiglError::IngestError(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| BiglError::IngestError(format!("{}: {e}", path.display())))
}

/// Side-by-side comparison of several runs: one block per metric, runs as
/// rows and regions as columns, the best defined entry per column marked
/// with `*` (highest dice, lowest distances). All runs must agree on the
/// region set.
pub fn compare_reports(entries: &[(String, MetricsReport)]) -> Result<String> {
    let Some((_, first)) = entries.first() else {
        return Err(BiglError::IngestError("no evaluation reports to compare".into()));
    };
    for (label, report) in entries {
        if report.regions != first.regions {
            return Err(BiglError::IngestError(format!(
                "region sets differ: {:?} reports {:?}, {:?} reports {:?}",
                entries[0].0, first.regions, label, report.regions
            )));
        }
    }
    let regions = &first.regions;
    let label_w = entries.iter().map(|(l, _)| l.len()).max().unwrap().max(6);
    let mut out = String::new();
    for (metric, head) in METRIC_HEADS {
        // pick the winner of each region column among defined means
        let winners: Vec<Option<usize>> = regions
            .iter()
            .map(|r| {
                let mut best: Option<(usize, f64)> = None;
                for (i, (_, rep)) in entries.iter().enumerate() {
                    let Some(s) = rep.summary.get(r) else { continue };
                    let mean = match metric {
                        "dsc" => Some(s.dsc_mean),
                        "hd95" => s.hd95_mean,
                        _ => s.asd_mean,
                    };
                    let Some(m) = mean else { continue };
                    let better = match best {
                        None => true,
                        Some((_, b)) => {
                            if metric == "dsc" {
                                m > b
                            } else {
                                m < b
                            }
                        }
                    };
                    if better {
                        best = Some((i, m));
                    }
                }
                best.map(|(i, _)| i)
            })
            .collect();
        let cells: Vec<Vec<String>> = entries
            .iter()
            .enumerate()
            .map(|(i, (_, rep))| {
                regions
                    .iter()
                    .enumerate()
                    .map(|(c, r)| {
                        let mut cell = rep.cell(r, metric);
                        if winners[c] == Some(i) {
                            cell.push('*');
                        }
                        cell
                    })
                    .collect()
            })
            .collect();
        let mut widths: Vec<usize> = regions.iter().map(|r| r.len()).collect();
        for row in &cells {
            for (c, cell) in row.iter().enumerate() {
                widths[c] = widths[c].max(cell.len());
            }
        }
        out.push_str(head);
        out.push('\n');
        let mut header = vec![pad("method", label_w)];
        for (c, r) in regions.iter().enumerate() {
            header.push(pad(r, widths[c]));
        }
        out.push_str(header.join("  ").trim_end());
        out.push('\n');
        for (i, (label, _)) in entries.iter().enumerate() {
            let mut row = vec![pad(label, label_w)];
            for (c, cell) in cells[i].iter().enumerate() {
                row.push(pad(cell, widths[c]));
            }
            out.push_str(row.join("  ").trim_end());
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out.trim_end().to_string() + "\n")
}
