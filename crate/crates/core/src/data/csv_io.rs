use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{label_from_ferritin, CohortDataset, Split};
use crate::error::{Error, Result};

const FIXED_COLUMNS: usize = 3;

enum LabelColumn {
    Label,
    Ferritin,
}

/// Reads one site's rows.
///
/// Columns: `site_id, split, label|ferritin, e0 .. e{d-1}`. A `ferritin` column
/// is converted to labels with the 15 µg/L rule. Errors carry 1-based line
/// numbers (the header is line 1).
pub fn load_embeddings_csv(path: impl AsRef<Path>) -> Result<CohortDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(None, format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::data(Some(1), e.to_string()))?.clone();
    if headers.len() <= FIXED_COLUMNS {
        return Err(Error::data(Some(1), format!("expected at least {} columns, found {}", FIXED_COLUMNS + 1, headers.len())));
    }
    if &headers[0] != "site_id" || &headers[1] != "split" {
        return Err(Error::data(Some(1), "header must start with site_id,split".to_string()));
    }
    let label_col = match &headers[2] {
        "label" => LabelColumn::Label,
        "ferritin" => LabelColumn::Ferritin,
        other => return Err(Error::data(Some(1), format!("third column must be label or ferritin, found {other:?}"))),
    };
    let width = headers.len() - FIXED_COLUMNS;
    for (i, name) in headers.iter().skip(FIXED_COLUMNS).enumerate() {
        if name != format!("e{i}") {
            return Err(Error::data(Some(1), format!("embedding column {i} must be named e{i}, found {name:?}")));
        }
    }

    let mut site_id: Option<String> = None;
    let mut values: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut ferritin = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::data(Some(line), e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::data(Some(line), format!("expected {} columns, found {}", headers.len(), record.len())));
        }
        match &site_id {
            None => site_id = Some(record[0].to_string()),
            Some(s) if s != &record[0] => {
                return Err(Error::data(Some(line), format!("file mixes sites {s:?} and {:?}", &record[0])));
            }
            Some(_) => {}
        }
        let split: Split = record[1].parse().map_err(|_| Error::data(Some(line), format!("unknown split tag {:?}", &record[1])))?;
        let label = match label_col {
            LabelColumn::Label => match &record[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::data(Some(line), format!("label must be 0 or 1, found {other:?}"))),
            },
            LabelColumn::Ferritin => {
                let f: f64 = record[2]
                    .parse()
                    .map_err(|_| Error::data(Some(line), format!("non-numeric ferritin {:?}", &record[2])))?;
                ferritin.push(f);
                label_from_ferritin(f).map_err(|e| Error::data(Some(line), e.to_string()))?
            }
        };
        for (col, cell) in record.iter().skip(FIXED_COLUMNS).enumerate() {
            let v: f32 = cell
                .parse()
                .map_err(|_| Error::data(Some(line), format!("non-numeric value {cell:?} in column e{col}")))?;
            if !v.is_finite() {
                return Err(Error::data(Some(line), format!("non-finite value in column e{col}")));
            }
            values.push(v);
        }
        labels.push(label);
        splits.push(split);
    }
    let site_id = site_id.ok_or_else(|| Error::data(None, format!("{} has no data rows", path.display())))?;
    let n = labels.len();
    let emb = Array2::from_shape_vec((n, width), values).map_err(|e| Error::Shape(e.to_string()))?;
    let ferritin = matches!(label_col, LabelColumn::Ferritin).then_some(ferritin);
    CohortDataset::new(site_id, emb, labels, splits, ferritin)
}

/// Writes the schema read by [`load_embeddings_csv`], using the ferritin column
/// when the dataset carries one.
pub fn write_embeddings_csv(dataset: &CohortDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let label_header = if dataset.ferritin().is_some() { "ferritin" } else { "label" };
    write!(out, "site_id,split,{label_header}")?;
    for i in 0..dataset.width() {
        write!(out, ",e{i}")?;
    }
    writeln!(out)?;
    for (i, row) in dataset.embeddings().rows().into_iter().enumerate() {
        write!(out, "{},{}", dataset.site_id(), dataset.splits()[i])?;
        match dataset.ferritin() {
            Some(f) => write!(out, ",{}", f[i])?,
            None => write!(out, ",{}", dataset.labels()[i])?,
        }
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
