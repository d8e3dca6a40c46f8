//! On-disk forms of the stacking inputs.
//!
//! Feature tables are CSV: a header row of feature names followed by one
//! row of floats per sample. Labels are plain text, one integer class id
//! per line. Both formats round-trip losslessly (floats are written in
//! shortest round-trip form).

use std::path::Path;

use histopath::stacking::FeatureVector;
use histopath::{Error, Result};

pub fn write_feature_table(path: &Path, rows: &[FeatureVector]) -> Result<()> {
    let first = rows
        .first()
        .ok_or_else(|| Error::validation("feature table needs at least one row"))?;
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    wtr.write_record(first.names()).map_err(|e| csv_err(path, e))?;
    for (i, row) in rows.iter().enumerate() {
        if row.names() != first.names() {
            return Err(Error::validation(format!(
                "feature row {i} has different feature names than row 0"
            )));
        }
        let record: Vec<String> = row.values().iter().map(|v| format!("{v}")).collect();
        wtr.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_feature_table(path: &Path) -> Result<Vec<FeatureVector>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != names.len() {
            return Err(Error::validation(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                rows.len() + 1,
                record.len(),
                names.len()
            )));
        }
        let mut values = Vec::with_capacity(names.len());
        for field in record.iter() {
            values.push(field.parse::<f64>().map_err(|_| {
                Error::validation(format!("{}: bad float {field:?}", path.display()))
            })?);
        }
        rows.push(FeatureVector::new(names.clone(), values)?);
    }
    if rows.is_empty() {
        return Err(Error::validation(format!(
            "{}: feature table has a header but no rows",
            path.display()
        )));
    }
    Ok(rows)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<usize>().map_err(|_| {
            Error::validation(format!(
                "{}: line {}: bad label {line:?} (expected a class id)",
                path.display(),
                idx + 1
            ))
        })?);
    }
    if labels.is_empty() {
        return Err(Error::validation(format!("{}: no labels found", path.display())));
    }
    Ok(labels)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::validation(format!("{}: csv: {e}", path.display()))
}
