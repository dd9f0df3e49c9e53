use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Dataset, FeatureSchema};
use crate::error::{CalError, Result};

pub fn load_schema(path: impl AsRef<Path>) -> Result<FeatureSchema> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CalError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a CSV whose header names every schema feature and the target, in
/// any order. Extra columns are ignored. Labels equal to the schema's
/// positive label map to 1, the single other value to 0.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CalError::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CalError::MissingColumn(name.to_string()))
    };
    let columns = schema
        .names()
        .map(find)
        .collect::<Result<Vec<usize>>>()?;
    let target_col = find(schema.target())?;

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(columns.len());
        for (fi, &col) in columns.iter().enumerate() {
            let cell = record.get(col).unwrap_or("").trim();
            let name = &schema.features()[fi].name;
            if cell.is_empty() {
                return Err(CalError::MissingValue {
                    column: name.clone(),
                    row: i,
                });
            }
            let v = schema.encode_value(fi, cell).map_err(|value| {
                if schema.features()[fi].is_categorical() {
                    CalError::UnknownCategory {
                        column: name.clone(),
                        row: i,
                        value,
                    }
                } else {
                    CalError::UnparseableNumeric {
                        column: name.clone(),
                        row: i,
                        value,
                    }
                }
            })?;
            row.push(v);
        }
        let label = record.get(target_col).unwrap_or("").trim().to_string();
        if label.is_empty() {
            return Err(CalError::MissingValue {
                column: schema.target().to_string(),
                row: i,
            });
        }
        rows.push(row);
        raw_labels.push(label);
    }
    if rows.is_empty() {
        return Err(CalError::EmptyDataset);
    }

    let distinct: BTreeSet<&str> = raw_labels.iter().map(String::as_str).collect();
    let positive = schema.positive_label();
    if distinct.len() > 2 {
        return Err(CalError::NonBinaryLabel {
            column: schema.target().to_string(),
            detail: format!("{} distinct values", distinct.len()),
        });
    }
    if distinct.len() == 2 && !distinct.contains(positive) {
        return Err(CalError::NonBinaryLabel {
            column: schema.target().to_string(),
            detail: format!("positive label `{positive}` not among {distinct:?}"),
        });
    }
    let labels = raw_labels
        .iter()
        .map(|l| u8::from(l == positive))
        .collect();
    Dataset::new(Arc::new(schema.clone()), rows, labels)
}

/// Write a dataset as CSV with features in schema order followed by the
/// target. Negative labels are written as `0` unless the positive label is
/// itself `0`, in which case they are written as `1`.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let schema = d.schema();
    let negative = if schema.positive_label() == "0" { "1" } else { "0" };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = schema.names().collect();
    header.push(schema.target());
    wtr.write_record(&header)?;
    for (i, row) in d.rows().enumerate() {
        let mut rec: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(fi, &v)| schema.decode_value(fi, v))
            .collect();
        rec.push(if d.label(i) == 1 {
            schema.positive_label().to_string()
        } else {
            negative.to_string()
        });
        wtr.write_record(&rec)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| CalError::io(path, e.into_error()))?;
    let mut file = File::create(path).map_err(|e| CalError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| CalError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, FeatureSchema};

    fn ab_schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                Feature::categorical("a", ["0", "1"]),
                Feature::categorical("b", ["0", "1"]),
            ],
            "y",
            "1",
        )
        .unwrap()
    }

    #[test]
    fn reads_four_rows_any_column_order() {
        let csv = "y,b,a\n0,0,0\n0,1,0\n1,0,1\n1,1,1\n";
        let d = read_csv(csv.as_bytes(), &ab_schema()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.row(1), &[0.0, 1.0]);
        assert_eq!(d.labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn rejects_three_label_values() {
        let csv = "a,b,y\n0,0,0\n0,1,1\n1,0,2\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &ab_schema()),
            Err(CalError::NonBinaryLabel { .. })
        ));
    }

    #[test]
    fn rejects_bad_cells() {
        let schema = ab_schema();
        assert!(matches!(
            read_csv("a,y\n0,1\n".as_bytes(), &schema),
            Err(CalError::MissingColumn(c)) if c == "b"
        ));
        assert!(matches!(
            read_csv("a,b,y\n0,2,1\n".as_bytes(), &schema),
            Err(CalError::UnknownCategory { .. })
        ));
        assert!(matches!(
            read_csv("a,b,y\n0,,1\n".as_bytes(), &schema),
            Err(CalError::MissingValue { .. })
        ));
        let numeric = FeatureSchema::new(vec![Feature::numeric("x")], "y", "1").unwrap();
        assert!(matches!(
            read_csv("x,y\nabc,1\n".as_bytes(), &numeric),
            Err(CalError::UnparseableNumeric { .. })
        ));
        assert!(matches!(
            read_csv("x,y\n1,no\n2,yes\n".as_bytes(), &numeric),
            Err(CalError::NonBinaryLabel { .. })
        ));
    }

    #[test]
    fn write_then_read_preserves_rows() {
        let csv = "a,b,y\n0,0,0\n0,1,0\n1,0,1\n1,1,1\n";
        let d = read_csv(csv.as_bytes(), &ab_schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&d, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), csv);
        assert_eq!(load_csv(&p, &ab_schema()).unwrap(), d);
    }
}
