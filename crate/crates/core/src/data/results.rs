use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AggregateReport, MeanStd};

/// One evaluated configuration: dataset × algorithm × K_max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub algorithm: String,
    pub k_max: usize,
    pub joint: bool,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub ic_accuracy: MeanStd,
    pub slot_f1: MeanStd,
}

impl ResultRecord {
    pub fn from_report(
        dataset: &str,
        algorithm: &str,
        k_max: usize,
        joint: bool,
        report: &AggregateReport,
    ) -> Self {
        ResultRecord {
            dataset: dataset.to_string(),
            algorithm: algorithm.to_string(),
            k_max,
            joint,
            episodes: report.episode_count,
            seeds: report.seeds.clone(),
            ic_accuracy: report.ic_accuracy,
            slot_f1: report.slot_f1,
        }
    }
}

const HEADER: &str =
    "dataset\talgorithm\tk_max\tjoint\tepisodes\tseeds\tic_mean\tic_std\tf1_mean\tf1_std";

/// Tab-separated records with a header row. Floats use the shortest
/// representation that parses back to the same value.
pub fn serialize_results(records: &[ResultRecord]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in records {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}",
            r.dataset,
            r.algorithm,
            r.k_max,
            r.joint,
            r.episodes,
            seeds.join(","),
            r.ic_accuracy.mean,
            r.ic_accuracy.std,
            r.slot_f1.mean,
            r.slot_f1.std
        );
    }
    out
}

pub fn parse_results(text: &str, origin: &str) -> Result<Vec<ResultRecord>> {
    let fail = |line: usize, message: String| Error::Format {
        module: "data_io",
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(fail(1, "missing results header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(fail(
                lineno,
                format!("expected 10 fields, found {}", f.len()),
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| fail(lineno, format!("bad number '{s}': {e}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| fail(lineno, format!("bad integer '{s}': {e}")))
        };
        let seeds = if f[5].is_empty() {
            Vec::new()
        } else {
            f[5].split(',')
                .map(|s| {
                    s.parse::<u64>()
                        .map_err(|e| fail(lineno, format!("bad seed '{s}': {e}")))
                })
                .collect::<Result<Vec<u64>>>()?
        };
        out.push(ResultRecord {
            dataset: f[0].to_string(),
            algorithm: f[1].to_string(),
            k_max: int(f[2])?,
            joint: f[3]
                .parse()
                .map_err(|_| fail(lineno, format!("bad flag '{}'", f[3])))?,
            episodes: int(f[4])?,
            seeds,
            ic_accuracy: MeanStd {
                mean: num(f[6])?,
                std: num(f[7])?,
            },
            slot_f1: MeanStd {
                mean: num(f[8])?,
                std: num(f[9])?,
            },
        });
    }
    Ok(out)
}

/// `65.46 +/- 0.81` for a fraction of 0.6546 ± 0.0081.
pub fn format_cell(v: &MeanStd) -> String {
    format!("{:.2} +/- {:.2}", v.mean * 100.0, v.std * 100.0)
}

/// Markdown tables, one per metric and K_max, with an algorithm per row and
/// a dataset (plain or joint) per column.
pub fn render_results_table(records: &[ResultRecord]) -> String {
    let k_values: BTreeSet<usize> = records.iter().map(|r| r.k_max).collect();
    let mut out = String::new();
    for k in k_values {
        let subset: Vec<&ResultRecord> = records.iter().filter(|r| r.k_max == k).collect();
        let mut columns: Vec<(String, bool)> = Vec::new();
        let mut rows: Vec<String> = Vec::new();
        for r in &subset {
            if !columns.contains(&(r.dataset.clone(), r.joint)) {
                columns.push((r.dataset.clone(), r.joint));
            }
            if !rows.contains(&r.algorithm) {
                rows.push(r.algorithm.clone());
            }
        }
        for (metric, pick) in [
            (
                "IC accuracy",
                (|r: &ResultRecord| r.ic_accuracy) as fn(&ResultRecord) -> MeanStd,
            ),
            ("Slot F1", |r: &ResultRecord| r.slot_f1),
        ] {
            let _ = writeln!(out, "### {metric}, K_max = {k}\n");
            let heads: Vec<String> = columns
                .iter()
                .map(|(d, j)| {
                    if *j {
                        format!("{d} (joint)")
                    } else {
                        d.clone()
                    }
                })
                .collect();
            let _ = writeln!(out, "| algorithm | {} |", heads.join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(columns.len()));
            for alg in &rows {
                let cells: Vec<String> = columns
                    .iter()
                    .map(|(d, j)| {
                        subset
                            .iter()
                            .find(|r| &r.algorithm == alg && &r.dataset == d && r.joint == *j)
                            .map(|r| format_cell(&pick(r)))
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect();
                let _ = writeln!(out, "| {alg} | {} |", cells.join(" | "));
            }
            out.push('\n');
        }
    }
    out
}

/// Path of the rendered table written next to a results file.
pub fn table_path(path: &Path) -> PathBuf {
    path.with_extension("md")
}

/// Writes the records to `path` and the rendered table next to it.
pub fn write_results(records: &[ResultRecord], path: &Path) -> Result<()> {
    fs::write(path, serialize_results(records)).map_err(|e| Error::io(path, e))?;
    let table = table_path(path);
    fs::write(&table, render_results_table(records)).map_err(|e| Error::io(&table, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, &path.display().to_string())
}
