use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    AttributeKind, AttributeRole, AttributeSchema, Dataset, Schema, UNKNOWN_LABEL, USER_ID_NAME,
};
use crate::error::{Error, Result};

/// Per-column declaration in a schema config file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub kind: AttributeKind,
    pub role: AttributeRole,
}

/// Column name to kind/role, as read from a JSON object.
pub type SchemaConfig = BTreeMap<String, ColumnSpec>;

pub fn load_schema_config(path: impl AsRef<Path>) -> Result<SchemaConfig> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Loads a CSV file into an encoded [`Dataset`].
///
/// User ids are the 0-based row indices. Categorical values get codes in
/// first-appearance order; empty fields in categorical columns become the
/// `"Unknown"` category, which receives the code after all observed values.
pub fn load_csv(path: impl AsRef<Path>, config: &SchemaConfig) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(file), config)
}

pub(crate) fn read_csv<R: std::io::Read>(reader: R, config: &SchemaConfig) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    check_header(&header, config)?;

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::MalformedRow {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            raw[col].push(field.trim().to_string());
        }
    }
    let rows = raw.first().map_or(0, Vec::len);

    let mut attributes = vec![AttributeSchema::user_id()];
    let mut columns = vec![(0..rows).map(|r| r as f64).collect::<Vec<f64>>()];
    for (name, values) in header.iter().zip(raw) {
        let spec = config[name];
        let (attr, column) = match spec.kind {
            AttributeKind::Ordinal => encode_ordinal(name, &values)?,
            AttributeKind::Categorical => encode_categorical(name, &values),
        };
        let (attr, column) = if spec.role == AttributeRole::Sensitive {
            as_sensitive(attr, column)?
        } else {
            (attr, column)
        };
        attributes.push(attr);
        columns.push(column);
    }
    let schema = Schema::new(attributes)?;
    let ids = (0..rows as u64).collect();
    Ok(Dataset::from_parts_unchecked(Arc::new(schema), ids, columns))
}

fn check_header(header: &[String], config: &SchemaConfig) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, name) in header.iter().enumerate() {
        if seen.insert(name.as_str(), i).is_some() {
            return Err(Error::Schema(format!("duplicate column {name}")));
        }
        if name == USER_ID_NAME {
            return Err(Error::Schema(format!(
                "column name {USER_ID_NAME} is reserved for the assigned user id"
            )));
        }
        match config.get(name) {
            None => return Err(Error::Schema(format!("column {name} missing from schema config"))),
            Some(spec) if spec.role == AttributeRole::UserId => {
                return Err(Error::Schema(format!(
                    "column {name}: user ids are assigned at load, not read from the file"
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(missing) = config.keys().find(|k| !seen.contains_key(k.as_str())) {
        return Err(Error::Schema(format!("config column {missing} not in header")));
    }
    Ok(())
}

fn encode_ordinal(name: &str, values: &[String]) -> Result<(AttributeSchema, Vec<f64>)> {
    let mut column = Vec::with_capacity(values.len());
    for (row, v) in values.iter().enumerate() {
        // header is line 1
        let line = row as u64 + 2;
        if v.is_empty() {
            return Err(Error::MalformedRow {
                line,
                message: format!("missing value in non-categorical column {name}"),
            });
        }
        let parsed: f64 = v.parse().map_err(|_| Error::MalformedRow {
            line,
            message: format!("column {name}: {v:?} is not a number"),
        })?;
        if !parsed.is_finite() {
            return Err(Error::MalformedRow {
                line,
                message: format!("column {name}: non-finite value"),
            });
        }
        column.push(parsed);
    }
    Ok((AttributeSchema::ordinal(name, column.clone()), column))
}

fn encode_categorical(name: &str, values: &[String]) -> (AttributeSchema, Vec<f64>) {
    let mut codes: HashMap<&str, usize> = HashMap::new();
    let mut labels: Vec<String> = Vec::new();
    let mut has_missing = false;
    for v in values {
        if v.is_empty() {
            has_missing = true;
        } else if !codes.contains_key(v.as_str()) {
            codes.insert(v, labels.len());
            labels.push(v.clone());
        }
    }
    let unknown = if has_missing {
        Some(*codes.entry(UNKNOWN_LABEL).or_insert_with(|| {
            labels.push(UNKNOWN_LABEL.to_string());
            labels.len() - 1
        }))
    } else {
        None
    };
    let column = values
        .iter()
        .map(|v| match (v.is_empty(), unknown) {
            (true, Some(u)) => u as f64,
            _ => codes[v.as_str()] as f64,
        })
        .collect();
    (AttributeSchema::categorical(name, labels), column)
}

fn as_sensitive(
    mut attr: AttributeSchema,
    column: Vec<f64>,
) -> Result<(AttributeSchema, Vec<f64>)> {
    let binary = column.iter().all(|v| *v == 0.0 || *v == 1.0);
    if !binary {
        return Err(Error::Schema(format!(
            "sensitive attribute {} must be binary",
            attr.name
        )));
    }
    attr.role = AttributeRole::Sensitive;
    attr.domain = vec![0.0, 1.0];
    if attr.kind == AttributeKind::Ordinal {
        attr.kind = AttributeKind::Categorical;
        attr.labels = vec!["0".into(), "1".into()];
    }
    Ok((attr, column))
}

/// How [`write_csv`] renders categorical values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueFormat {
    /// Decoded labels; `"Unknown"` is written as an empty field so the file
    /// loads back into the same categories.
    Labels,
    /// Raw integer codes.
    Codes,
}

/// Writes every attribute except the assigned user id.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W, format: ValueFormat) -> Result<()> {
    let schema = dataset.schema();
    let uid = schema.user_id_index();
    let attrs: Vec<usize> = (0..schema.len()).filter(|&a| a != uid).collect();
    let mut wtr = csv::WriterBuilder::new().from_writer(writer);
    wtr.write_record(attrs.iter().map(|&a| schema.attribute(a).name.as_str()))?;
    for row in 0..dataset.len() {
        let fields = attrs.iter().map(|&a| {
            let attr = schema.attribute(a);
            let v = dataset.value(row, a);
            match (format, attr.kind) {
                (ValueFormat::Labels, AttributeKind::Categorical) if !attr.labels.is_empty() => {
                    match attr.decode(v) {
                        Some(UNKNOWN_LABEL) => String::new(),
                        Some(label) => label.to_string(),
                        None => format_number(v),
                    }
                }
                _ => format_number(v),
            }
        });
        wtr.write_record(fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub(crate) fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
