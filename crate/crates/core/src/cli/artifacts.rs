//! Writing and reading run artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::pipeline::RunReport;
use crate::error::{Error, Result};

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-run tables: method accuracies, per-source weights, the weight
/// trajectory, per-epoch metrics, ablations and the pseudo-label weight sweep.
pub fn write_run_tables(dir: &Path, report: &RunReport) -> Result<()> {
    write_csv(
        &dir.join("methods.csv"),
        &["method", "accuracy"],
        report.methods.iter().map(|m| vec![m.method.clone(), m.accuracy.to_string()]),
    )?;
    write_csv(
        &dir.join("source_alpha.csv"),
        &["source", "unadapted_accuracy", "adapted_accuracy", "alpha"],
        report.sources.iter().map(|s| {
            vec![
                s.name.clone(),
                s.unadapted_target_accuracy.to_string(),
                opt(s.adapted_target_accuracy),
                opt(s.alpha),
            ]
        }),
    )?;
    if let Some(d) = &report.decision {
        let mut header = vec!["epoch".to_string()];
        header.extend(report.sources.iter().map(|s| s.name.clone()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &dir.join("alpha_trajectory.csv"),
            &header,
            d.alpha_trajectory.iter().enumerate().map(|(e, a)| {
                let mut row = vec![e.to_string()];
                row.extend(a.iter().map(f64::to_string));
                row
            }),
        )?;
        write_jsonl(&dir.join("metrics.jsonl"), &d.epochs)?;
    }
    if !report.ablations.is_empty() {
        write_csv(
            &dir.join("ablations.csv"),
            &["objective", "accuracy", "label_entropy"],
            report
                .ablations
                .iter()
                .map(|a| vec![a.objective.clone(), a.accuracy.to_string(), a.label_entropy.to_string()]),
        )?;
    }
    if !report.lambda_sweep.is_empty() {
        write_csv(
            &dir.join("lambda_sweep.csv"),
            &["lambda", "accuracy"],
            report
                .lambda_sweep
                .iter()
                .map(|p| vec![p.lambda.to_string(), p.accuracy.to_string()]),
        )?;
    }
    Ok(())
}
