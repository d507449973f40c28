//! Checkpoint file: versioned JSON. Every fp64 array is stored as base64 of
//! its little-endian bytes, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, FeatureSpec, Labels, PreprocessStats, TaskKind};
use crate::error::{bail, Error, Result};
use crate::models::{BatchNormState, ModelConfig, ModelDims, NamedTensor, TopModel};
use crate::numerics::Tensor;
use crate::tokenizer::FeatureTokenizer;

use super::network::{Network, Reweight};
use super::pipeline::TrainRecord;
use super::train::argmax;

pub const FORMAT_VERSION: u32 = 1;

/// A trained network with everything needed to apply it to raw tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub task: TaskKind,
    pub class_names: Vec<String>,
    pub label_name: String,
    pub preprocess: PreprocessStats,
    pub record: TrainRecord,
}

impl Checkpoint {
    pub fn new(
        network: Network,
        source: &DatasetTable,
        preprocess: PreprocessStats,
        record: TrainRecord,
    ) -> Result<Self> {
        network.tokenizer.check_schema(&source.schema)?;
        Ok(Self {
            network,
            task: source.task.clone(),
            class_names: source.class_names.clone(),
            label_name: source.label_name.clone(),
            preprocess,
            record,
        })
    }

    pub fn schema(&self) -> &[FeatureSpec] {
        self.network.tokenizer.schema()
    }

    /// Predictions for a raw table: class indices as f64, or regression
    /// values on the original scale.
    pub fn predict_raw(&self, raw: &DatasetTable, jobs: usize) -> Result<Vec<f64>> {
        let table = self.preprocess.apply(raw)?;
        let out = self.network.predict(&table, jobs)?;
        Ok(if self.task.is_regression() {
            out.into_iter().map(|z| self.preprocess.restore_target(z)).collect()
        } else {
            out.chunks(self.network.out_dim()).map(|r| argmax(r) as f64).collect()
        })
    }

    /// Accuracy (classification) or RMSE on the original scale (regression).
    pub fn evaluate(&self, raw: &DatasetTable, jobs: usize) -> Result<f64> {
        if raw.task != self.task {
            bail!(Schema, "table task does not match the checkpoint task");
        }
        let pred = self.predict_raw(raw, jobs)?;
        match &raw.labels {
            Labels::Class(y) => {
                let classes: Vec<usize> = pred.iter().map(|&p| p as usize).collect();
                crate::experiment::accuracy(&classes, y)
            }
            Labels::Target(t) => crate::experiment::rmse(&pred, t),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Wire::from_checkpoint(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: Wire = serde_json::from_str(text)?;
        wire.into_checkpoint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Schema(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        bail!(Schema, "base64 array is not a whole number of f64 values");
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTensor {
    shape: Vec<usize>,
    trainable: bool,
    data: String,
}

impl WireTensor {
    fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            trainable: t.is_trainable(),
            data: encode(t.data()),
        }
    }

    fn into_tensor(self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape, decode(&self.data)?)?.requires_grad(self.trainable))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireNamed {
    name: String,
    tensor: WireTensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireBatchNorm {
    name: String,
    mean: String,
    var: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTokenizer {
    k: usize,
    table: WireTensor,
    frozen: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireModel {
    config: ModelConfig,
    dims: ModelDims,
    params: Vec<WireNamed>,
    batch_norm: Vec<WireBatchNorm>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireReweight {
    library: WireTensor,
    new_tokens: Option<WireTensor>,
    weights: WireTensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wire {
    format_version: u32,
    schema: Vec<FeatureSpec>,
    schema_fingerprint: String,
    task: TaskKind,
    class_names: Vec<String>,
    label_name: String,
    preprocess: PreprocessStats,
    tokenizer: WireTokenizer,
    model: WireModel,
    reweight: Option<WireReweight>,
    record: TrainRecord,
}

impl Wire {
    fn from_checkpoint(c: &Checkpoint) -> Self {
        let net = &c.network;
        let model = &net.model;
        Self {
            format_version: FORMAT_VERSION,
            schema: c.schema().to_vec(),
            schema_fingerprint: net.tokenizer.fingerprint(),
            task: c.task.clone(),
            class_names: c.class_names.clone(),
            label_name: c.label_name.clone(),
            preprocess: c.preprocess.clone(),
            tokenizer: WireTokenizer {
                k: net.tokenizer.k(),
                table: WireTensor::from_tensor(net.tokenizer.table()),
                frozen: net.tokenizer.frozen().to_vec(),
            },
            model: WireModel {
                config: model.config.clone(),
                dims: model.dims,
                params: model
                    .params()
                    .iter()
                    .map(|p| WireNamed {
                        name: p.name.clone(),
                        tensor: WireTensor::from_tensor(&p.tensor),
                    })
                    .collect(),
                batch_norm: model
                    .batch_norm_states()
                    .iter()
                    .map(|b| WireBatchNorm {
                        name: b.name.clone(),
                        mean: encode(&b.mean),
                        var: encode(&b.var),
                    })
                    .collect(),
            },
            reweight: net.reweight.as_ref().map(|r| WireReweight {
                library: WireTensor::from_tensor(&r.library),
                new_tokens: r.new_tokens.as_ref().map(WireTensor::from_tensor),
                weights: WireTensor::from_tensor(&r.weights),
            }),
            record: c.record.clone(),
        }
    }

    fn into_checkpoint(self) -> Result<Checkpoint> {
        if self.format_version != FORMAT_VERSION {
            bail!(
                Schema,
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            );
        }
        let table = self.tokenizer.table.into_tensor()?;
        let trainable = table.is_trainable();
        let mut tokenizer =
            FeatureTokenizer::from_parts(self.schema, self.tokenizer.k, table.into_data(), self.tokenizer.frozen)?;
        tokenizer.table_mut().set_requires_grad(trainable);
        if tokenizer.fingerprint() != self.schema_fingerprint {
            bail!(Schema, "checkpoint schema fingerprint does not match its schema");
        }
        let params = self
            .model
            .params
            .into_iter()
            .map(|p| {
                Ok(NamedTensor {
                    name: p.name,
                    tensor: p.tensor.into_tensor()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let batch_norm = self
            .model
            .batch_norm
            .into_iter()
            .map(|b| {
                Ok(BatchNormState {
                    name: b.name,
                    mean: decode(&b.mean)?,
                    var: decode(&b.var)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = TopModel::from_parts(self.model.config, self.model.dims, params, batch_norm)?;
        let reweight = match self.reweight {
            Some(r) => Some(Reweight {
                library: r.library.into_tensor()?,
                new_tokens: r.new_tokens.map(WireTensor::into_tensor).transpose()?,
                weights: r.weights.into_tensor()?,
            }),
            None => None,
        };
        Ok(Checkpoint {
            network: Network::new(tokenizer, reweight, model)?,
            task: self.task,
            class_names: self.class_names,
            label_name: self.label_name,
            preprocess: self.preprocess,
            record: self.record,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base64_is_bit_exact() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, f64::EPSILON];
        let back = decode(&encode(&v)).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode("AAAA").is_err());
        assert!(decode("not base64!").is_err());
    }
}
