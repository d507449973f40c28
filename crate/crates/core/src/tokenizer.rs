//! Feature tokenizer: numerical feature `j` maps to `x·E_j`, categorical
//! feature `j` selects one row of its `K_j × k` lookup table. All token rows
//! live in one `[rows, k]` table; feature `j` owns rows `offsets[j]..offsets[j+1]`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{Cell, DatasetTable, FeatureKind, FeatureSpec};
use crate::error::{bail, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTokenizer {
    schema: Vec<FeatureSpec>,
    k: usize,
    offsets: Vec<usize>,
    table: Tensor,
    frozen: Vec<bool>,
}

fn offsets_for(schema: &[FeatureSpec]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(schema.len() + 1);
    let mut at = 0;
    offsets.push(0);
    for f in schema {
        at += match &f.kind {
            FeatureKind::Numerical => 1,
            FeatureKind::Categorical { categories } => categories.len(),
        };
        offsets.push(at);
    }
    offsets
}

/// Uniform on `±√(6/fan)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(n: usize, fan: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / fan as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl FeatureTokenizer {
    pub fn init(schema: &[FeatureSpec], k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            bail!(InvalidArgument, "token dimension k must be at least 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = *offsets_for(schema).last().unwrap();
        let data = kaiming_uniform(rows * k, k, &mut rng);
        Self::from_parts(schema.to_vec(), k, data, vec![false; rows])
    }

    pub fn from_parts(schema: Vec<FeatureSpec>, k: usize, data: Vec<f64>, frozen: Vec<bool>) -> Result<Self> {
        if schema.is_empty() {
            bail!(InvalidArgument, "tokenizer needs at least one feature");
        }
        if k == 0 {
            bail!(InvalidArgument, "token dimension k must be at least 1");
        }
        if let Some(f) = schema.iter().find(|f| f.cardinality() == Some(0)) {
            bail!(InvalidArgument, "categorical feature '{}' has no categories", f.name);
        }
        let offsets = offsets_for(&schema);
        let rows = *offsets.last().unwrap();
        if frozen.len() != rows {
            bail!(InvalidArgument, "{} freeze flags for {rows} token rows", frozen.len());
        }
        let table = Tensor::new(vec![rows, k], data)?.requires_grad(true);
        Ok(Self {
            schema,
            k,
            offsets,
            table,
            frozen,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn schema(&self) -> &[FeatureSpec] {
        &self.schema
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn n_rows(&self) -> usize {
        self.table.rows()
    }

    pub fn rows_of(&self, feature: usize) -> Range<usize> {
        self.offsets[feature]..self.offsets[feature + 1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    /// Mutable table together with the freeze flags, for optimizer updates.
    pub fn table_and_frozen(&mut self) -> (&mut Tensor, &[bool]) {
        (&mut self.table, &self.frozen)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.table.row(r)
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, row: usize, flag: bool) {
        self.frozen[row] = flag;
    }

    /// Row of the token table and the scale applied to it for one cell.
    pub fn lookup(&self, feature: usize, cell: Cell) -> Result<(usize, f64)> {
        let spec = &self.schema[feature];
        match (cell, &spec.kind) {
            (Cell::Num(x), FeatureKind::Numerical) => Ok((self.offsets[feature], x)),
            (Cell::Cat(c), FeatureKind::Categorical { categories }) => {
                if c >= categories.len() {
                    bail!(
                        Data,
                        "feature '{}': category {c} out of {}",
                        spec.name,
                        categories.len()
                    );
                }
                Ok((self.offsets[feature] + c, 1.0))
            }
            (Cell::Missing, _) => bail!(Data, "feature '{}': missing cell reached the tokenizer", spec.name),
            _ => bail!(
                Schema,
                "feature '{}': cell kind does not match the tokenizer",
                spec.name
            ),
        }
    }

    /// Gather plan for a batch: `rows.len()·d` (index, scale) pairs, row-major.
    pub fn plan<'a, I>(&self, rows: I) -> Result<(Vec<usize>, Vec<f64>)>
    where
        I: IntoIterator<Item = &'a [Cell]>,
    {
        let mut index = Vec::new();
        let mut scale = Vec::new();
        for row in rows {
            if row.len() != self.n_features() {
                bail!(
                    Schema,
                    "row has {} cells, tokenizer expects {}",
                    row.len(),
                    self.n_features()
                );
            }
            for (j, &cell) in row.iter().enumerate() {
                let (r, s) = self.lookup(j, cell)?;
                index.push(r);
                scale.push(s);
            }
        }
        Ok((index, scale))
    }

    /// Token matrices for `rows` as a `[rows.len()·d, k]` node, drawing token
    /// rows from `table` (this tokenizer's table, or any table with the same layout).
    pub fn forward<'a, I>(&self, g: &mut Graph, table: Var, rows: I) -> Result<Var>
    where
        I: IntoIterator<Item = &'a [Cell]>,
    {
        let (index, scale) = self.plan(rows)?;
        Ok(g.scaled_gather(table, index, scale))
    }

    /// `d × k` token matrix of one instance.
    pub fn tokenize_instance(&self, row: &[Cell]) -> Result<Vec<Vec<f64>>> {
        if row.len() != self.n_features() {
            bail!(
                Schema,
                "row has {} cells, tokenizer expects {}",
                row.len(),
                self.n_features()
            );
        }
        row.iter()
            .enumerate()
            .map(|(j, &cell)| {
                let (r, s) = self.lookup(j, cell)?;
                Ok(self.table.row(r).iter().map(|v| v * s).collect())
            })
            .collect()
    }

    /// Token matrices for every row of `table`, flattened `[N, d, k]`.
    pub fn tokenize_batch(&self, table: &DatasetTable) -> Result<Vec<f64>> {
        self.check_schema(&table.schema)?;
        let mut out = Vec::with_capacity(table.n_rows() * self.n_features() * self.k);
        for row in &table.rows {
            for tok in self.tokenize_instance(row)? {
                out.extend(tok);
            }
        }
        Ok(out)
    }

    pub fn check_schema(&self, schema: &[FeatureSpec]) -> Result<()> {
        if schema != self.schema.as_slice() {
            bail!(Schema, "table schema does not match the tokenizer schema");
        }
        Ok(())
    }

    /// Hex SHA-256 of the schema (names, kinds, category labels).
    pub fn fingerprint(&self) -> String {
        schema_fingerprint(&self.schema)
    }
}

pub fn schema_fingerprint(schema: &[FeatureSpec]) -> String {
    let bytes = serde_json::to_vec(schema).expect("schema serializes");
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
