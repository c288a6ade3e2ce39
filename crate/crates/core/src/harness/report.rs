//! CSV and JSON reports.
//!
//! The CSV is long format: one `seed` row per task x method x m x seed and
//! one `aggregate` row per run, with a fixed column order.

use std::fs::{self, File};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::RunResult;
use super::scaling::ScalingPoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "row",
    "task",
    "method",
    "m",
    "seed",
    "accuracy",
    "std",
    "n_test",
    "k",
    "k_effective",
    "distance",
    "mask",
    "centroid",
    "demos_per_class",
    "imbalance_lambda",
    "fallback_to_icl",
];

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn csv_rows(run: &RunResult) -> Vec<Vec<String>> {
    let c = &run.config;
    let common = |row: &str, seed: String, acc: f64, std: String, n: String, k_eff: String, fb: String| {
        vec![
            row.to_string(),
            c.task.clone(),
            c.method.to_string(),
            c.m.to_string(),
            seed,
            acc.to_string(),
            std,
            n,
            c.k.to_string(),
            k_eff,
            enum_name(&c.distance),
            enum_name(&c.mask),
            c.centroid.to_string(),
            c.demo_per_class.to_string(),
            c.imbalance_lambda.to_string(),
            fb,
        ]
    };
    let mut rows: Vec<Vec<String>> = run
        .seeds
        .iter()
        .map(|s| {
            common(
                "seed",
                s.seed.to_string(),
                s.accuracy,
                String::new(),
                s.n_test.to_string(),
                s.k_effective.map(|k| k.to_string()).unwrap_or_default(),
                s.fallback_to_icl.to_string(),
            )
        })
        .collect();
    let total: usize = run.seeds.iter().map(|s| s.n_test).sum();
    let any_fallback = run.seeds.iter().any(|s| s.fallback_to_icl);
    rows.push(common(
        "aggregate",
        String::new(),
        run.mean,
        run.std.to_string(),
        total.to_string(),
        String::new(),
        any_fallback.to_string(),
    ));
    rows
}

pub fn write_csv(results: &[RunResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for run in results {
        for row in csv_rows(run) {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write `results` to `path` in the given format.
pub fn emit_report(results: &[RunResult], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if results.is_empty() {
        return Err(Error::InsufficientData("no results to report".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match format {
        ReportFormat::Csv => write_csv(results, path),
        ReportFormat::Json => {
            let mut body = serde_json::to_vec_pretty(results)?;
            body.push(b'\n');
            fs::write(path, body)?;
            Ok(())
        }
    }
}

pub fn read_json_report(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_scaling_csv(points: &[ScalingPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scaling_csv(path: impl AsRef<Path>) -> Result<Vec<ScalingPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::{ExperimentConfig, SeedResult};

    fn run() -> RunResult {
        RunResult {
            config: ExperimentConfig {
                task: "sst2".into(),
                seeds: vec![0, 1, 2],
                ..ExperimentConfig::default()
            },
            seeds: [0.7, 0.8, 0.95]
                .iter()
                .enumerate()
                .map(|(i, &a)| SeedResult {
                    seed: i as u64,
                    accuracy: a,
                    n_test: 20,
                    k_effective: Some(3),
                    fallback_to_icl: false,
                })
                .collect(),
            mean: (0.7 + 0.8 + 0.95) / 3.0,
            std: 0.1,
            audit: vec![],
        }
    }

    #[test]
    fn csv_row_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_report(&[run()], ReportFormat::Csv, &path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(&rows[3][0], "aggregate");
        let seeds: Vec<f64> = rows[..3].iter().map(|r| r[5].parse().unwrap()).collect();
        let agg: f64 = rows[3][5].parse().unwrap();
        assert!((agg - seeds.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&[run()], ReportFormat::Json, &path).unwrap();
        assert_eq!(read_json_report(&path).unwrap(), vec![run()]);
        assert!(emit_report(&[], ReportFormat::Json, &path).is_err());
    }

    #[test]
    fn scaling_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pts = vec![
            ScalingPoint { m: 2, accuracy: 0.6, error: 0.4, std: 0.05 },
            ScalingPoint { m: 8, accuracy: 0.75, error: 0.25, std: 0.02 },
        ];
        write_scaling_csv(&pts, &path).unwrap();
        assert_eq!(read_scaling_csv(&path).unwrap(), pts);
    }
}
