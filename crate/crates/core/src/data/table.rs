use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical,
    /// Category labels in index order; the cardinality is `categories.len()`.
    Categorical {
        categories: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numerical,
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.kind, FeatureKind::Numerical)
    }

    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Numerical => None,
            FeatureKind::Categorical { categories } => Some(categories.len()),
        }
    }

    pub fn categories(&self) -> &[String] {
        match &self.kind {
            FeatureKind::Numerical => &[],
            FeatureKind::Categorical { categories } => categories,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Num(f64),
    Cat(usize),
    Missing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn for_classes(classes: usize) -> Self {
        if classes == 2 {
            TaskKind::Binary
        } else {
            TaskKind::Multiclass { classes }
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            TaskKind::Binary => Some(2),
            TaskKind::Multiclass { classes } => Some(*classes),
            TaskKind::Regression => None,
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, TaskKind::Regression)
    }

    /// Width of the model output: one logit per class, or a single value.
    pub fn output_dim(&self) -> usize {
        self.n_classes().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Labels {
    Class(Vec<usize>),
    Target(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Target(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Class(v) => Some(v),
            Labels::Target(_) => None,
        }
    }

    pub fn targets(&self) -> Option<&[f64]> {
        match self {
            Labels::Target(v) => Some(v),
            Labels::Class(_) => None,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(rows.iter().map(|&r| v[r]).collect()),
            Labels::Target(v) => Labels::Target(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

/// Schema-tagged rows with labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetTable {
    pub schema: Vec<FeatureSpec>,
    pub rows: Vec<Vec<Cell>>,
    pub labels: Labels,
    pub task: TaskKind,
    /// Class names in index order (classification only).
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub label_name: String,
}

impl DatasetTable {
    /// Validates every invariant of the table before returning it.
    pub fn new(
        schema: Vec<FeatureSpec>,
        rows: Vec<Vec<Cell>>,
        labels: Labels,
        task: TaskKind,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let table = Self {
            schema,
            rows,
            labels,
            task,
            class_names,
            label_name: "label".to_string(),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn with_label_name(mut self, name: impl Into<String>) -> Self {
        self.label_name = name.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            bail!(Data, "table has no rows");
        }
        if self.labels.len() != self.rows.len() {
            bail!(Data, "{} rows but {} labels", self.rows.len(), self.labels.len());
        }
        let d = self.schema.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != d {
                bail!(Data, "row {i} has {} cells, schema has {d}", row.len());
            }
            for (j, (cell, spec)) in row.iter().zip(&self.schema).enumerate() {
                match (cell, &spec.kind) {
                    (Cell::Missing, _) | (Cell::Num(_), FeatureKind::Numerical) => {}
                    (Cell::Cat(c), FeatureKind::Categorical { categories }) => {
                        if *c >= categories.len() {
                            bail!(
                                Data,
                                "row {i} feature {j}: category {c} >= cardinality {}",
                                categories.len()
                            );
                        }
                    }
                    _ => bail!(
                        Data,
                        "row {i} feature {j} ('{}'): cell kind does not match schema",
                        spec.name
                    ),
                }
            }
        }
        match (&self.labels, &self.task) {
            (Labels::Class(v), task) if !task.is_regression() => {
                let c = task.n_classes().unwrap();
                if let Some(bad) = v.iter().find(|&&y| y >= c) {
                    bail!(Data, "class label {bad} out of {c} classes");
                }
                if !self.class_names.is_empty() && self.class_names.len() != c {
                    bail!(Data, "{} class names for {c} classes", self.class_names.len());
                }
            }
            (Labels::Target(_), TaskKind::Regression) => {}
            _ => bail!(Data, "label kind does not match task {:?}", self.task),
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|f| f.name == name)
    }

    /// Rows (and labels) at `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DatasetTable {
        DatasetTable {
            schema: self.schema.clone(),
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
            labels: self.labels.select(rows),
            task: self.task.clone(),
            class_names: self.class_names.clone(),
            label_name: self.label_name.clone(),
        }
    }

    /// Keeps only the listed feature columns, in the listed order.
    pub fn select_features(&self, features: &[usize]) -> DatasetTable {
        DatasetTable {
            schema: features.iter().map(|&j| self.schema[j].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|row| features.iter().map(|&j| row[j]).collect())
                .collect(),
            labels: self.labels.clone(),
            task: self.task.clone(),
            class_names: self.class_names.clone(),
            label_name: self.label_name.clone(),
        }
    }

    pub fn has_missing(&self) -> bool {
        self.rows.iter().flatten().any(|c| matches!(c, Cell::Missing))
    }

    /// Row indices per class (classification only), each list ascending.
    pub fn rows_by_class(&self) -> Option<Vec<Vec<usize>>> {
        let labels = self.labels.classes()?;
        let mut out = vec![Vec::new(); self.task.n_classes()?];
        for (i, &y) in labels.iter().enumerate() {
            out[y].push(i);
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetTable {
        DatasetTable::new(
            vec![FeatureSpec::numerical("a"), FeatureSpec::categorical("b", ["x", "y"])],
            vec![
                vec![Cell::Num(1.0), Cell::Cat(0)],
                vec![Cell::Num(2.0), Cell::Cat(1)],
                vec![Cell::Missing, Cell::Cat(1)],
            ],
            Labels::Class(vec![0, 1, 1]),
            TaskKind::Binary,
            vec!["no".into(), "yes".into()],
        )
        .unwrap()
    }

    #[test]
    fn validation_catches_bad_cells() {
        let t = tiny();
        let mut bad = t.clone();
        bad.rows[0][1] = Cell::Cat(2);
        assert!(bad.validate().is_err());
        let mut bad = t.clone();
        bad.rows[0][0] = Cell::Cat(0);
        assert!(bad.validate().is_err());
        let mut bad = t.clone();
        bad.labels = Labels::Class(vec![0, 1, 2]);
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.rows.clear();
        bad.labels = Labels::Class(vec![]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn selection() {
        let t = tiny();
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.labels, Labels::Class(vec![1, 0]));
        assert_eq!(s.rows[1][0], Cell::Num(1.0));
        let f = t.select_features(&[1]);
        assert_eq!(f.n_features(), 1);
        assert_eq!(f.schema[0].name, "b");
        assert_eq!(t.rows_by_class().unwrap(), vec![vec![0], vec![1, 2]]);
    }
}
