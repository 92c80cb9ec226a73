//! Aggregation of finished runs. Numbers are copied from the run artifacts,
//! never recomputed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::{read_json, write_csv, write_json};
use super::pipeline::{DistillSummary, RunReport};
use crate::error::{Error, Result};

pub const DISTILLED: &str = "Distilled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub seed: u64,
    pub spearman_alpha_vs_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<RunSummary>,
    pub method_rows: usize,
    pub lambda_rows: usize,
}

struct LoadedRun {
    label: String,
    report: RunReport,
    distill: Option<DistillSummary>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join("run_report.json");
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} has no run_report.json", dir.display()),
        )));
    }
    let distill_path = dir.join("distill.json");
    let distill = if distill_path.is_file() {
        Some(read_json(&distill_path)?)
    } else {
        None
    };
    Ok(LoadedRun {
        label: dir.display().to_string(),
        report: read_json(&path)?,
        distill,
    })
}

/// Writes `methods.csv`, `alpha_vs_accuracy.csv`, `lambda_sweep.csv` (when
/// any run has sweep points) and `summary.json` into `out`.
pub fn cmd_report(out: &Path, runs: &[PathBuf]) -> Result<ReportSummary> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let loaded = runs.iter().map(|r| load_run(r)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;

    let mut method_rows = Vec::new();
    for r in &loaded {
        for m in &r.report.methods {
            method_rows.push(vec![
                r.label.clone(),
                r.report.seed.to_string(),
                m.method.clone(),
                m.accuracy.to_string(),
            ]);
        }
        if let Some(d) = &r.distill {
            method_rows.push(vec![
                r.label.clone(),
                r.report.seed.to_string(),
                DISTILLED.to_string(),
                d.student_accuracy.to_string(),
            ]);
        }
    }
    let n_methods = method_rows.len();
    write_csv(&out.join("methods.csv"), &["run", "seed", "method", "accuracy"], method_rows)?;

    write_csv(
        &out.join("alpha_vs_accuracy.csv"),
        &["run", "seed", "source", "unadapted_accuracy", "alpha"],
        loaded.iter().flat_map(|r| {
            r.report.sources.iter().filter_map(move |s| {
                s.alpha.map(|a| {
                    vec![
                        r.label.clone(),
                        r.report.seed.to_string(),
                        s.name.clone(),
                        s.unadapted_target_accuracy.to_string(),
                        a.to_string(),
                    ]
                })
            })
        }),
    )?;

    let sweep: Vec<Vec<String>> = loaded
        .iter()
        .flat_map(|r| {
            r.report.lambda_sweep.iter().map(move |p| {
                vec![
                    r.label.clone(),
                    r.report.seed.to_string(),
                    p.lambda.to_string(),
                    p.accuracy.to_string(),
                ]
            })
        })
        .collect();
    let lambda_rows = sweep.len();
    if lambda_rows > 0 {
        write_csv(&out.join("lambda_sweep.csv"), &["run", "seed", "lambda", "accuracy"], sweep)?;
    }

    let summary = ReportSummary {
        runs: loaded
            .iter()
            .map(|r| RunSummary {
                run: r.label.clone(),
                seed: r.report.seed,
                spearman_alpha_vs_accuracy: r.report.spearman_alpha_vs_accuracy,
            })
            .collect(),
        method_rows: n_methods,
        lambda_rows,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("{} runs, {} method rows, {} sweep rows", loaded.len(), n_methods, lambda_rows);
    Ok(summary)
}
