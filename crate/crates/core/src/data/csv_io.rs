//! CSV ingestion and export. Empty cells are missing values.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::table::{Cell, DatasetTable, FeatureKind, FeatureSpec, Labels, TaskKind};
use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Num,
    Cat,
}

/// Sidecar entry for one column. `categories` fixes the category order for
/// `cat` columns; values outside the list are a data error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnHint {
    pub kind: Option<ColumnKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelHint {
    Classification,
    Regression,
}

/// Column hints keyed by header name, plus an optional label interpretation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaHint {
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnHint>,
    #[serde(default)]
    pub label: Option<LabelHint>,
}

impl SchemaHint {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Hint that pins every column of `table` to its current kind and vocabulary.
    pub fn from_table(table: &DatasetTable) -> Self {
        Self::from_schema(&table.schema, &table.task)
    }

    pub fn from_schema(schema: &[FeatureSpec], task: &TaskKind) -> Self {
        let columns = schema
            .iter()
            .map(|f| {
                let hint = match &f.kind {
                    FeatureKind::Numerical => ColumnHint {
                        kind: Some(ColumnKind::Num),
                        categories: None,
                    },
                    FeatureKind::Categorical { categories } => ColumnHint {
                        kind: Some(ColumnKind::Cat),
                        categories: Some(categories.clone()),
                    },
                };
                (f.name.clone(), hint)
            })
            .collect();
        let label = Some(if task.is_regression() {
            LabelHint::Regression
        } else {
            LabelHint::Classification
        });
        Self { columns, label }
    }
}

pub fn load_csv(path: &Path, hint: &SchemaHint, label_column: &str) -> Result<DatasetTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, hint, label_column).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_csv<R: std::io::Read>(reader: R, hint: &SchemaHint, label_column: &str) -> Result<DatasetTable> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        bail!(Data, "missing header row");
    }
    let Some(label_idx) = header.iter().position(|h| h == label_column) else {
        bail!(Data, "label column '{label_column}' not found in header");
    };
    for name in hint.columns.keys() {
        if !header.contains(name) {
            bail!(Data, "schema hint names unknown column '{name}'");
        }
    }
    let mut raw: Vec<Vec<String>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            bail!(
                Data,
                "row {} has {} fields, header has {}",
                i + 1,
                rec.len(),
                header.len()
            );
        }
        raw.push(rec.iter().map(|s| s.trim().to_string()).collect());
    }
    if raw.is_empty() {
        bail!(Data, "no data rows");
    }

    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| c != label_idx).collect();
    let mut schema = Vec::with_capacity(feature_cols.len());
    let mut columns: Vec<Vec<Cell>> = Vec::with_capacity(feature_cols.len());
    for &c in &feature_cols {
        let values: Vec<&str> = raw.iter().map(|r| r[c].as_str()).collect();
        let (spec, cells) = parse_column(&header[c], &values, hint.columns.get(&header[c]))?;
        schema.push(spec);
        columns.push(cells);
    }
    let rows = (0..raw.len())
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();

    let label_values: Vec<&str> = raw.iter().map(|r| r[label_idx].as_str()).collect();
    if let Some(i) = label_values.iter().position(|v| v.is_empty()) {
        bail!(Data, "row {} has a missing label", i + 1);
    }
    let (labels, task, class_names) = parse_labels(&label_values, hint.label)?;
    Ok(DatasetTable::new(schema, rows, labels, task, class_names)?.with_label_name(label_column))
}

fn parse_column(name: &str, values: &[&str], hint: Option<&ColumnHint>) -> Result<(FeatureSpec, Vec<Cell>)> {
    let all_numeric = values.iter().all(|v| v.is_empty() || v.parse::<f64>().is_ok());
    let kind = match hint.and_then(|h| h.kind) {
        Some(k) => k,
        None if hint.is_some_and(|h| h.categories.is_some()) => ColumnKind::Cat,
        None if all_numeric && values.iter().any(|v| !v.is_empty()) => ColumnKind::Num,
        None => ColumnKind::Cat,
    };
    match kind {
        ColumnKind::Num => {
            let cells = values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if v.is_empty() {
                        Ok(Cell::Missing)
                    } else {
                        v.parse::<f64>()
                            .map(Cell::Num)
                            .map_err(|_| Error::Data(format!("column '{name}' row {}: '{v}' is not a number", i + 1)))
                    }
                })
                .collect::<Result<_>>()?;
            Ok((FeatureSpec::numerical(name), cells))
        }
        ColumnKind::Cat => {
            let fixed = hint.and_then(|h| h.categories.clone());
            let mut categories: Vec<String> = fixed.clone().unwrap_or_default();
            let mut index: HashMap<String, usize> =
                categories.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
            let mut cells = Vec::with_capacity(values.len());
            for (i, v) in values.iter().enumerate() {
                let idx = match index.get(*v) {
                    Some(&idx) => idx,
                    // missing cells form their own category, labelled ""
                    None if fixed.is_none() || v.is_empty() => {
                        categories.push(v.to_string());
                        index.insert(v.to_string(), categories.len() - 1);
                        categories.len() - 1
                    }
                    None => bail!(
                        Data,
                        "column '{name}' row {}: '{v}' not among declared categories",
                        i + 1
                    ),
                };
                cells.push(Cell::Cat(idx));
            }
            Ok((FeatureSpec::categorical(name, categories), cells))
        }
    }
}

/// Class names sort numerically when every label parses as a number,
/// lexicographically otherwise.
fn parse_labels(values: &[&str], hint: Option<LabelHint>) -> Result<(Labels, TaskKind, Vec<String>)> {
    let numbers: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
    let as_regression = match hint {
        Some(LabelHint::Regression) => true,
        Some(LabelHint::Classification) => false,
        None => numbers
            .as_ref()
            .is_some_and(|ns| ns.iter().any(|x| x.fract() != 0.0 || !x.is_finite())),
    };
    if as_regression {
        let Some(ns) = numbers else {
            bail!(Data, "regression label column has non-numeric values");
        };
        return Ok((Labels::Target(ns), TaskKind::Regression, Vec::new()));
    }
    let mut names: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    names.sort();
    names.dedup();
    if numbers.is_some() {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    if names.len() < 2 {
        bail!(Data, "classification needs at least 2 classes, found {}", names.len());
    }
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let labels = values.iter().map(|v| index[v]).collect();
    let task = TaskKind::for_classes(names.len());
    Ok((Labels::Class(labels), task, names))
}

/// Writes features then the label column. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: std::io::Write>(table: &DatasetTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = table.schema.iter().map(|f| f.name.as_str()).collect();
    let label_name = if table.label_name.is_empty() {
        "label"
    } else {
        &table.label_name
    };
    header.push(label_name);
    wtr.write_record(&header)?;
    for (i, row) in table.rows.iter().enumerate() {
        let mut rec: Vec<String> = row
            .iter()
            .zip(&table.schema)
            .map(|(cell, spec)| match cell {
                Cell::Num(x) => format!("{x:?}"),
                Cell::Cat(c) => spec.categories()[*c].clone(),
                Cell::Missing => String::new(),
            })
            .collect();
        rec.push(match &table.labels {
            Labels::Class(v) => table.class_names.get(v[i]).cloned().unwrap_or_else(|| v[i].to_string()),
            Labels::Target(v) => format!("{:?}", v[i]),
        });
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(table: &DatasetTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(table, file)
}
