//! Top-layer models over feature tokens.
//!
//! Every model reads a `[B·d, k]` token node. Linear, MLP and ResNet first
//! combine each instance's tokens (average → `k`, concat → `d·k`); the
//! transformer consumes the token set directly and averages its output tokens
//! before the prediction head.

mod linear;
mod mlp;
mod resnet;
mod transformer;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mlp::MlpConfig;
pub use resnet::ResNetConfig;
pub use transformer::TransformerConfig;

use crate::error::{bail, Result};
use crate::numerics::{sample_mask, Graph, Tensor, Var};
use crate::objective::CombineMode;
use crate::tokenizer::kaiming_uniform;

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Single linear layer on the combined tokens.
    Linear,
    Mlp(MlpConfig),
    Resnet(ResNetConfig),
    Transformer(TransformerConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Transformer(TransformerConfig::default())
    }
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Linear => "linear",
            ModelConfig::Mlp(_) => "mlp",
            ModelConfig::Resnet(_) => "resnet",
            ModelConfig::Transformer(_) => "transformer",
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let check_rate = |name: &str, r: f64| -> Result<()> {
            if !(0.0..1.0).contains(&r) {
                bail!(Config, "{name} must lie in [0, 1), got {r}");
            }
            Ok(())
        };
        match self {
            ModelConfig::Linear => {}
            ModelConfig::Mlp(c) => {
                check_rate("mlp.dropout", c.dropout)?;
                if c.hidden == 0 {
                    bail!(Config, "mlp.hidden must be positive");
                }
            }
            ModelConfig::Resnet(c) => {
                check_rate("resnet.hidden_dropout", c.hidden_dropout)?;
                check_rate("resnet.residual_dropout", c.residual_dropout)?;
                if c.layer_size == 0 || c.hidden_size() == 0 {
                    bail!(Config, "resnet sizes must be positive");
                }
            }
            ModelConfig::Transformer(c) => {
                check_rate("transformer.attention_dropout", c.attention_dropout)?;
                check_rate("transformer.ffn_dropout", c.ffn_dropout)?;
                check_rate("transformer.residual_dropout", c.residual_dropout)?;
                if c.heads == 0 || !k.is_multiple_of(c.heads) {
                    bail!(Config, "token dimension {k} is not divisible by {} heads", c.heads);
                }
                if c.ffn_hidden(k) == 0 {
                    bail!(Config, "transformer FFN width is zero for k={k}");
                }
            }
        }
        Ok(())
    }
}

/// Input and output sizes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub k: usize,
    pub d: usize,
    pub out: usize,
    pub combine: CombineMode,
}

impl ModelDims {
    /// Width of the combined instance vector fed to non-transformer models.
    pub fn combined_width(&self) -> usize {
        match self.combine {
            CombineMode::Average => self.k,
            CombineMode::Concat => self.d * self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Which parameters stay trainable when fine-tuning a warm-started model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    #[default]
    Full,
    /// Only the tokenizer trains.
    FixTopLayer,
    /// Last transformer layer and the head.
    TuneLastLayer,
    /// Attention blocks and the head.
    TuneAttention,
    /// FFN linear layers and the head.
    TuneLinear,
}

impl TuningMode {
    pub fn requires_transformer(self) -> bool {
        matches!(
            self,
            TuningMode::TuneLastLayer | TuningMode::TuneAttention | TuningMode::TuneLinear
        )
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Applies inverted dropout in training mode.
    fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let mask = sample_mask(g.value(x).len(), rate, &mut **rng)?;
                Ok(g.mul_const(x, mask))
            }
            _ => Ok(x),
        }
    }

    fn mask(&mut self, n: usize, rate: f64) -> Result<Option<Vec<f64>>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => Ok(Some(sample_mask(n, rate, &mut **rng)?)),
            _ => Ok(None),
        }
    }
}

pub struct Forward {
    /// `[B, out]` predictions (logits or regression values).
    pub output: Var,
    /// Batch statistics of each batch-norm layer in training mode: (mean, population var, rows).
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    params: Vec<NamedTensor>,
    #[serde(default)]
    batch_norm: Vec<BatchNormState>,
}

/// Creates parameters in a fixed order from one RNG stream.
pub(crate) struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    params: Vec<NamedTensor>,
    batch_norm: Vec<BatchNormState>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        let tensor = Tensor::new(shape, data).expect("builder shapes").requires_grad(true);
        self.params.push(NamedTensor { name, tensor });
    }

    /// Kaiming-uniform `[input, output]` weight and zero bias.
    pub(crate) fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        let w = kaiming_uniform(input * output, input, self.rng);
        self.push(format!("{prefix}.weight"), vec![input, output], w);
        self.push(format!("{prefix}.bias"), vec![output], vec![0.0; output]);
    }

    /// Unit scale, zero shift.
    pub(crate) fn norm(&mut self, prefix: &str, width: usize, batch: bool) {
        self.push(format!("{prefix}.weight"), vec![width], vec![1.0; width]);
        self.push(format!("{prefix}.bias"), vec![width], vec![0.0; width]);
        if batch {
            self.batch_norm.push(BatchNormState {
                name: prefix.to_string(),
                mean: vec![0.0; width],
                var: vec![1.0; width],
            });
        }
    }
}

/// Parameter nodes of one forward pass, looked up by name.
pub(crate) struct Bound<'m> {
    vars: HashMap<&'m str, Var>,
    batch_norm: &'m [BatchNormState],
}

impl Bound<'_> {
    pub(crate) fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub(crate) fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let w = self.get(&format!("{prefix}.weight"));
        let b = self.get(&format!("{prefix}.bias"));
        g.linear(x, w, b)
    }

    pub(crate) fn layer_norm(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let w = self.get(&format!("{prefix}.weight"));
        let b = self.get(&format!("{prefix}.bias"));
        g.layer_norm(x, w, b, NORM_EPS)
    }

    pub(crate) fn batch_norm(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        mode: &Mode<'_>,
        stats: &mut Vec<(Vec<f64>, Vec<f64>, usize)>,
    ) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"));
        let b = self.get(&format!("{prefix}.bias"));
        if mode.is_train() {
            let rows = g.shape(x)[0];
            if rows < 2 {
                bail!(
                    InvalidArgument,
                    "batch norm in training mode needs at least 2 rows, got {rows}"
                );
            }
            let (y, mean, var) = g.batch_norm(x, w, b, NORM_EPS);
            stats.push((mean, var, rows));
            Ok(y)
        } else {
            let state = self
                .batch_norm
                .iter()
                .find(|s| s.name == prefix)
                .expect("batch norm state registered at init");
            let scale = state.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            Ok(g.channel_affine(x, w, b, state.mean.clone(), scale))
        }
    }
}

impl TopModel {
    pub fn init(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate(dims.k)?;
        if dims.k == 0 || dims.d == 0 || dims.out == 0 {
            bail!(InvalidArgument, "model dimensions must be positive: {dims:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            batch_norm: Vec::new(),
        };
        match &config {
            ModelConfig::Linear => linear::init(&mut b, &dims),
            ModelConfig::Mlp(c) => mlp::init(&mut b, &dims, c),
            ModelConfig::Resnet(c) => resnet::init(&mut b, &dims, c),
            ModelConfig::Transformer(c) => transformer::init(&mut b, &dims, c),
        }
        let Builder { params, batch_norm, .. } = b;
        Ok(Self {
            config,
            dims,
            params,
            batch_norm,
        })
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn batch_norm_states(&self) -> &[BatchNormState] {
        &self.batch_norm
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self.config, ModelConfig::Transformer(_))
    }

    /// Rebuilds a model from stored parts, checking them against a fresh layout.
    pub fn from_parts(
        config: ModelConfig,
        dims: ModelDims,
        params: Vec<NamedTensor>,
        batch_norm: Vec<BatchNormState>,
    ) -> Result<Self> {
        let layout = Self::init(config, dims, 0)?;
        if layout.params.len() != params.len() || layout.batch_norm.len() != batch_norm.len() {
            bail!(
                Schema,
                "stored {} model does not match its configuration",
                layout.config.name()
            );
        }
        for (a, b) in layout.params.iter().zip(&params) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                bail!(Schema, "parameter '{}' does not match the configured layout", b.name);
            }
        }
        for (a, b) in layout.batch_norm.iter().zip(&batch_norm) {
            if a.name != b.name || a.mean.len() != b.mean.len() || a.var.len() != b.var.len() {
                bail!(
                    Schema,
                    "batch norm state '{}' does not match the configured layout",
                    b.name
                );
            }
        }
        Ok(Self {
            params,
            batch_norm,
            ..layout
        })
    }

    /// Places every parameter on the graph; the result is indexed like [`TopModel::params`].
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(&p.tensor)).collect()
    }

    /// `tokens: [B·d, k]` → predictions `[B, out]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        tokens: Var,
        batch: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        let shape = g.shape(tokens);
        if shape != [batch * self.dims.d, self.dims.k] {
            bail!(
                Contract,
                "model expects [{}, {}] tokens, got {:?}",
                batch * self.dims.d,
                self.dims.k,
                shape
            );
        }
        if vars.len() != self.params.len() {
            bail!(
                Contract,
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            );
        }
        let bound = Bound {
            vars: self
                .params
                .iter()
                .map(|p| p.name.as_str())
                .zip(vars.iter().copied())
                .collect(),
            batch_norm: &self.batch_norm,
        };
        let mut batch_stats = Vec::new();
        let output = match &self.config {
            ModelConfig::Linear => linear::forward(g, &bound, &self.dims, tokens, batch),
            ModelConfig::Mlp(c) => mlp::forward(g, &bound, &self.dims, c, tokens, batch, mode)?,
            ModelConfig::Resnet(c) => resnet::forward(g, &bound, &self.dims, c, tokens, batch, mode, &mut batch_stats)?,
            ModelConfig::Transformer(c) => transformer::forward(g, &bound, &self.dims, c, tokens, batch, mode)?,
        };
        Ok(Forward { output, batch_stats })
    }

    /// Folds training-mode batch statistics into the running estimates
    /// (momentum 0.1, unbiased batch variance).
    pub fn update_running_stats(&mut self, batch_stats: &[(Vec<f64>, Vec<f64>, usize)]) {
        for (state, (mean, var, rows)) in self.batch_norm.iter_mut().zip(batch_stats) {
            let unbias = *rows as f64 / (*rows as f64 - 1.0);
            for j in 0..state.mean.len() {
                state.mean[j] = (1.0 - BATCH_NORM_MOMENTUM) * state.mean[j] + BATCH_NORM_MOMENTUM * mean[j];
                state.var[j] = (1.0 - BATCH_NORM_MOMENTUM) * state.var[j] + BATCH_NORM_MOMENTUM * var[j] * unbias;
            }
        }
    }

    /// Copies every parameter and batch-norm state of `source` whose name and
    /// shape match; the rest keep their current values. Returns the copied names.
    pub fn warm_start_from(&mut self, source: &TopModel) -> Vec<String> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(src) = source.param(&p.name) {
                if src.shape() == p.tensor.shape() {
                    p.tensor.data_mut().copy_from_slice(src.data());
                    copied.push(p.name.clone());
                }
            }
        }
        for s in &mut self.batch_norm {
            if let Some(src) = source
                .batch_norm
                .iter()
                .find(|b| b.name == s.name && b.mean.len() == s.mean.len())
            {
                s.mean.clone_from(&src.mean);
                s.var.clone_from(&src.var);
            }
        }
        copied
    }

    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            let flag = keep(&p.name);
            p.tensor.set_requires_grad(flag);
        }
    }

    pub fn apply_tuning_mode(&mut self, mode: TuningMode) -> Result<()> {
        if mode.requires_transformer() && !self.is_transformer() {
            bail!(Config, "tuning mode {mode:?} needs a transformer top layer");
        }
        let last = match &self.config {
            ModelConfig::Transformer(c) => c.layers.saturating_sub(1),
            _ => 0,
        };
        let last_prefix = format!("layers.{last}.");
        let is_head = |n: &str| n.starts_with("head.");
        match mode {
            TuningMode::Full => self.set_trainable(|_| true),
            TuningMode::FixTopLayer => self.set_trainable(|_| false),
            TuningMode::TuneLastLayer => self.set_trainable(|n| is_head(n) || n.starts_with(&last_prefix)),
            TuningMode::TuneAttention => self.set_trainable(|n| is_head(n) || n.contains(".attention.")),
            TuningMode::TuneLinear => self.set_trainable(|n| is_head(n) || n.contains(".ffn.")),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }
}

/// Draws a fresh seed from `rng` (for components that seed their own streams).
pub fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}
