use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{synthetic, DatasetTable, FeatureKind, FeatureSpec, Labels};
use crate::error::{bail, Error, Result};
use crate::numerics::exact_sum;
use crate::tokenizer::FeatureTokenizer;
use crate::transfer::Checkpoint;

/// Two category tokens declared semantically equal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub feature_a: String,
    pub category_a: String,
    pub feature_b: String,
    pub category_b: String,
}

/// Declared structure of the tokens under inspection.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySpec {
    pub pairs: Vec<TokenPair>,
    pub noise_features: Vec<String>,
}

impl GeometrySpec {
    /// Pairs and noise features of the four-class synthetic benchmark.
    pub fn synthetic() -> Self {
        let mut pairs = Vec::new();
        for (a, b) in synthetic::PAIRED_FEATURES {
            let (fa, ca) = synthetic::FEATURES[a];
            let (fb, cb) = synthetic::FEATURES[b];
            for c in 0..ca.len() {
                pairs.push(TokenPair {
                    feature_a: fa.into(),
                    category_a: ca[c].into(),
                    feature_b: fb.into(),
                    category_b: cb[c].into(),
                });
            }
        }
        Self {
            pairs,
            noise_features: synthetic::NOISE_FEATURES
                .iter()
                .map(|&j| synthetic::FEATURES[j].0.to_string())
                .collect(),
        }
    }

    /// Drops pairs and noise features that `schema` does not contain.
    pub fn restricted_to(mut self, schema: &[FeatureSpec]) -> Self {
        let has = |name: &str| schema.iter().any(|f| f.name == name);
        self.pairs.retain(|p| has(&p.feature_a) && has(&p.feature_b));
        self.noise_features.retain(|n| has(n));
        self
    }
}

/// Distance ratio, with 0/0 reported as 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: f64,
    pub denominator: f64,
    pub value: f64,
    /// Set when the denominator was zero.
    pub degenerate: bool,
}

impl Ratio {
    fn new(numerator: f64, denominator: f64) -> Self {
        let degenerate = denominator == 0.0;
        Self {
            numerator,
            denominator,
            value: if degenerate { 1.0 } else { numerator / denominator },
            degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScatter {
    pub class: String,
    pub count: usize,
    pub center: Vec<f64>,
    /// Mean Euclidean distance of the class's instance tokens to its center.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    /// Mean distance of declared pairs over the mean distance of every other
    /// cross-feature pair of informative tokens.
    pub paired: Option<Ratio>,
    /// Mean pairwise distance among noise tokens over that among informative tokens.
    pub noise_cluster: Option<Ratio>,
    pub class_scatter: Vec<ClassScatter>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    exact_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y))).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        exact_sum(values.iter().copied()) / values.len() as f64
    }
}

fn token_row(t: &FeatureTokenizer, feature: &str, category: &str) -> Result<usize> {
    let j = t
        .schema()
        .iter()
        .position(|f| f.name == feature)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown feature '{feature}'")))?;
    let c = t.schema()[j]
        .categories()
        .iter()
        .position(|c| c == category)
        .ok_or_else(|| Error::InvalidArgument(format!("feature '{feature}' has no category '{category}'")))?;
    Ok(t.rows_of(j).start + c)
}

/// (token row, feature index) for every token row.
fn rows_with_feature(t: &FeatureTokenizer) -> Vec<(usize, usize)> {
    (0..t.n_features())
        .flat_map(|j| t.rows_of(j).map(move |r| (r, j)))
        .collect()
}

pub fn token_geometry(tokenizer: &FeatureTokenizer, spec: &GeometrySpec) -> Result<(Option<Ratio>, Option<Ratio>)> {
    for name in &spec.noise_features {
        if !tokenizer.schema().iter().any(|f| &f.name == name) {
            bail!(InvalidArgument, "unknown noise feature '{name}'");
        }
    }
    let is_noise = |j: usize| spec.noise_features.contains(&tokenizer.schema()[j].name);
    let rows = rows_with_feature(tokenizer);
    let informative: Vec<(usize, usize)> = rows.iter().copied().filter(|&(_, j)| !is_noise(j)).collect();
    let noise: Vec<usize> = rows.iter().filter(|&&(_, j)| is_noise(j)).map(|&(r, _)| r).collect();

    let paired = if spec.pairs.is_empty() {
        None
    } else {
        let mut declared = Vec::new();
        for p in &spec.pairs {
            let a = token_row(tokenizer, &p.feature_a, &p.category_a)?;
            let b = token_row(tokenizer, &p.feature_b, &p.category_b)?;
            declared.push((a.min(b), a.max(b)));
        }
        let pair_d: Vec<f64> = declared
            .iter()
            .map(|&(a, b)| distance(tokenizer.row(a), tokenizer.row(b)))
            .collect();
        let mut base_d = Vec::new();
        for (x, &(a, fa)) in informative.iter().enumerate() {
            for &(b, fb) in &informative[x + 1..] {
                if fa != fb && !declared.contains(&(a.min(b), a.max(b))) {
                    base_d.push(distance(tokenizer.row(a), tokenizer.row(b)));
                }
            }
        }
        Some(Ratio::new(mean(&pair_d), mean(&base_d)))
    };

    let noise_cluster = if noise.len() < 2 || informative.len() < 2 {
        None
    } else {
        let within = |rows: &[usize]| {
            let mut d = Vec::new();
            for (x, &a) in rows.iter().enumerate() {
                for &b in &rows[x + 1..] {
                    d.push(distance(tokenizer.row(a), tokenizer.row(b)));
                }
            }
            mean(&d)
        };
        let info_rows: Vec<usize> = informative.iter().map(|&(r, _)| r).collect();
        Some(Ratio::new(within(&noise), within(&info_rows)))
    };
    Ok((paired, noise_cluster))
}

/// Instance-token (average of feature tokens) center and spread per class.
/// `table` must already be preprocessed for the checkpoint.
pub fn class_scatter(tokenizer: &FeatureTokenizer, table: &DatasetTable) -> Result<Vec<ClassScatter>> {
    let Labels::Class(y) = &table.labels else {
        return Ok(Vec::new());
    };
    let k = tokenizer.k();
    let instances = table
        .rows
        .iter()
        .map(|row| {
            let tokens = tokenizer.tokenize_instance(row)?;
            crate::objective::combine_average(&tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = table.task.n_classes().unwrap_or(0);
    let mut out = Vec::new();
    for c in 0..classes {
        let members: Vec<&Vec<f64>> = instances
            .iter()
            .zip(y)
            .filter(|(_, &l)| l == c)
            .map(|(t, _)| t)
            .collect();
        if members.is_empty() {
            continue;
        }
        let center: Vec<f64> = (0..k)
            .map(|i| exact_sum(members.iter().map(|t| t[i])) / members.len() as f64)
            .collect();
        let spread: Vec<f64> = members.iter().map(|t| distance(t, &center)).collect();
        out.push(ClassScatter {
            class: table.class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
            count: members.len(),
            center,
            spread: mean(&spread),
        });
    }
    Ok(out)
}

/// Paired-token, noise-cluster and optional per-class diagnostics. `table` is raw.
pub fn token_geometry_report(
    chk: &Checkpoint,
    spec: &GeometrySpec,
    table: Option<&DatasetTable>,
) -> Result<GeometryReport> {
    let tokenizer = &chk.network.tokenizer;
    let (paired, noise_cluster) = token_geometry(tokenizer, spec)?;
    let class_scatter = match table {
        Some(raw) => class_scatter(tokenizer, &chk.preprocess.apply(raw)?)?,
        None => Vec::new(),
    };
    Ok(GeometryReport {
        paired,
        noise_cluster,
        class_scatter,
    })
}

/// CSV with `feature_name, category_label, t0..t{k-1}`; one row per token.
pub fn write_tokens<W: std::io::Write>(tokenizer: &FeatureTokenizer, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["feature_name".to_string(), "category_label".to_string()];
    header.extend((0..tokenizer.k()).map(|i| format!("t{i}")));
    w.write_record(&header)?;
    for (j, f) in tokenizer.schema().iter().enumerate() {
        let labels: Vec<&str> = match &f.kind {
            FeatureKind::Numerical => vec![""],
            FeatureKind::Categorical { categories } => categories.iter().map(String::as_str).collect(),
        };
        for (r, label) in tokenizer.rows_of(j).zip(labels) {
            let mut rec = vec![f.name.clone(), label.to_string()];
            rec.extend(tokenizer.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: "<token export>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn export_tokens(chk: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tokens(&chk.network.tokenizer, file)
}
