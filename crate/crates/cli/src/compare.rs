//! Mean +- std of final test error across record CSVs, grouped by method.

use std::fs;
use std::path::{Path, PathBuf};

use flatmatch_core::trainers::RECORD_CSV_HEADER;
use flatmatch_core::{Error, Result};

struct Record {
    method: String,
    steps: Vec<usize>,
    final_err: f64,
}

fn method_of(path: &Path) -> String {
    // prefer the manifest next to the record; fall back to the file stem
    for probe in [path.with_file_name("manifest.json"), path.with_file_name("config.json")] {
        if let Ok(text) = fs::read_to_string(&probe) {
            if let Ok(json) = text.parse::<serde_json::Value>() {
                if let Some(name) = json.get("experiment").and_then(|v| v.as_str()) {
                    return name.to_string();
                }
            }
        }
    }
    path.file_stem().map_or_else(|| "unknown".into(), |s| s.to_string_lossy().into_owned())
}

fn load_record(path: &Path) -> Result<Record> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse(format!("{}: empty", path.display())))?;
    if header != RECORD_CSV_HEADER {
        return Err(Error::Config(format!(
            "{}: header does not match the record schema",
            path.display()
        )));
    }
    let err_col = 5; // test_err
    let mut steps = Vec::new();
    let mut final_err = f64::NAN;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let step: usize = cols[0]
            .parse()
            .map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), lineno + 2)))?;
        steps.push(step);
        final_err = cols[err_col]
            .parse()
            .map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), lineno + 2)))?;
    }
    if steps.is_empty() {
        return Err(Error::Config(format!("{}: no records", path.display())));
    }
    Ok(Record { method: method_of(path), steps, final_err })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Build the summary table; rows are (method, runs, mean, std), best first
/// output order preserved from first appearance.
pub fn compare(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Config("compare needs at least one record path".into()));
    }
    let records: Vec<Record> = paths.iter().map(|p| load_record(p)).collect::<Result<_>>()?;

    // all records must share the eval schedule
    for r in &records[1..] {
        if r.steps != records[0].steps {
            return Err(Error::Config(
                "records do not share an eval schedule; refusing to compare".into(),
            ));
        }
    }

    let mut methods: Vec<String> = Vec::new();
    for r in &records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let rows: Vec<(String, usize, f64, f64)> = methods
        .iter()
        .map(|m| {
            let errs: Vec<f64> =
                records.iter().filter(|r| &r.method == m).map(|r| r.final_err).collect();
            let (mean, std) = mean_std(&errs);
            (m.clone(), errs.len(), mean, std)
        })
        .collect();
    let best = rows
        .iter()
        .map(|r| r.2)
        .fold(f64::INFINITY, f64::min);

    let mut table = String::from("method  runs  final_test_err (mean +- std)\n");
    for (method, runs, mean, std) in &rows {
        let cell = format!("{mean:.4} +- {std:.4}");
        let cell = if *mean == best { format!("**{cell}**") } else { cell };
        table.push_str(&format!("{method}  {runs}  {cell}\n"));
    }

    if let Some(path) = out {
        let mut csv = String::from("method,runs,mean_err,std_err\n");
        for (method, runs, mean, std) in &rows {
            csv.push_str(&format!("{method},{runs},{mean},{std}\n"));
        }
        fs::write(path, csv)?;
    }
    Ok(table)
}
