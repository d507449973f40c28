use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tabtoken::data::{FeatureCounts, OverlapLevel, OverlapRequest};
use tabtoken::experiment::{ExperimentPlan, PipelineKind};
use tabtoken::models::{MlpConfig, ModelConfig, ResNetConfig, TransformerConfig};
use tabtoken::transfer::PipelineConfig;

use crate::error::{CliError, CliResult};

/// Every knob of every command. Unknown keys are rejected, all at once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub pipeline: PipelineConfig,
    pub protocol: ProtocolConfig,
    pub reweight: ReweightConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Full dataset CSV.
    pub path: Option<PathBuf>,
    /// Optional column-kind hints (JSON).
    pub schema: Option<PathBuf>,
    pub label: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            schema: None,
            label: "label".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Reuse a saved split manifest instead of planning a new split.
    pub manifest: Option<PathBuf>,
    pub overlap: OverlapRequest,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            overlap: ExperimentPlan::default().overlap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub shots: usize,
    pub n_subsets: usize,
    pub n_seeds: usize,
    pub pipeline: PipelineKind,
    /// Few-shot subset used by the single-run `finetune` commands.
    pub subset: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let plan = ExperimentPlan::default();
        Self {
            shots: plan.shots,
            n_subsets: plan.n_subsets,
            n_seeds: plan.n_seeds,
            pipeline: plan.pipeline,
            subset: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightConfig {
    /// Extra learnable tokens in the token library.
    pub n_new: usize,
}

impl RunConfig {
    pub fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            shots: self.protocol.shots,
            n_subsets: self.protocol.n_subsets,
            n_seeds: self.protocol.n_seeds,
            pipeline: self.protocol.pipeline,
            overlap: self.split.overlap.clone(),
            config: self.pipeline.clone(),
        }
    }

    pub fn from_json_str(text: &str) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid JSON: {e}")))?;
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(CliError::config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig =
            serde_json::from_value(with_defaults(value)).map_err(|e| CliError::config(e.to_string()))?;
        cfg.plan().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| CliError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })
    }
}

/// Default config with the model section matching the input's model kind.
fn defaults_for(input: &Value) -> Value {
    let mut t = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let kind = input.pointer("/pipeline/model/kind").and_then(Value::as_str);
    let model = match kind {
        Some("linear") => ModelConfig::Linear,
        Some("mlp") => ModelConfig::Mlp(MlpConfig::default()),
        Some("resnet") => ModelConfig::Resnet(ResNetConfig::default()),
        _ => ModelConfig::Transformer(TransformerConfig::default()),
    };
    t["pipeline"]["model"] = serde_json::to_value(model).expect("model config serializes");
    t
}

/// Input laid over the defaults, object by object. The overlap request is
/// an enum and replaces the default whole.
fn with_defaults(input: Value) -> Value {
    fn merge(base: &mut Value, input: Value, path: &str) {
        match (base, input) {
            (Value::Object(b), Value::Object(i)) if path != "split.overlap" => {
                for (k, v) in i {
                    let here = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    match b.get_mut(&k) {
                        Some(slot) => merge(slot, v, &here),
                        None => {
                            b.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }
    let mut base = defaults_for(&input);
    merge(&mut base, input, "");
    base
}

/// Shape of an accepted config. A `null` leaf accepts any value.
fn template(input: &Value) -> Value {
    let mut t = defaults_for(input);
    let counts = FeatureCounts { d: 0, d_t: 0, s: 0 };
    t["split"]["overlap"] = json!({
        "level": { "level": OverlapLevel::Medium, "dataset": null },
        "counts": counts,
        "explicit": { "pretrain": null, "downstream": null },
    });
    t
}

/// Dotted paths of every key the config schema does not know.
pub fn unknown_keys(input: &Value) -> Vec<String> {
    fn walk(input: &Value, tmpl: &Value, path: &str, out: &mut Vec<String>) {
        let (Value::Object(obj), Value::Object(known)) = (input, tmpl) else {
            return;
        };
        for (k, v) in obj {
            let here = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            match known.get(k) {
                Some(t) => walk(v, t, &here, out),
                None => out.push(here),
            }
        }
    }
    let mut out = Vec::new();
    walk(input, &template(input), "", &mut out);
    out
}
