use serde::{Deserialize, Serialize};

use super::{Bound, Builder, Mode, ModelDims};
use crate::error::Result;
use crate::numerics::{Graph, Var};
use crate::objective::combine;

/// ```text
/// ResNet(x) = Prediction(Block(…Block(Linear(x))))
/// Block(x)  = x + Dropout_res(Linear(Dropout_hidden(ReLU(Linear(BatchNorm(x))))))
/// Prediction(x) = Linear(ReLU(BatchNorm(x)))
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResNetConfig {
    pub layers: usize,
    pub layer_size: usize,
    pub hidden_factor: f64,
    pub hidden_dropout: f64,
    pub residual_dropout: f64,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            layer_size: 168,
            hidden_factor: 2.9,
            hidden_dropout: 0.5,
            residual_dropout: 0.0,
        }
    }
}

impl ResNetConfig {
    /// `⌊layer_size · hidden_factor⌋`.
    pub fn hidden_size(&self) -> usize {
        (self.layer_size as f64 * self.hidden_factor) as usize
    }
}

pub(super) fn init(b: &mut Builder<'_>, dims: &ModelDims, c: &ResNetConfig) {
    let (w, h) = (c.layer_size, c.hidden_size());
    b.linear("input", dims.combined_width(), w);
    for i in 0..c.layers {
        b.norm(&format!("blocks.{i}.norm"), w, true);
        b.linear(&format!("blocks.{i}.linear1"), w, h);
        b.linear(&format!("blocks.{i}.linear2"), h, w);
    }
    b.norm("head_norm", w, true);
    b.linear("head", w, dims.out);
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward(
    g: &mut Graph,
    p: &Bound<'_>,
    dims: &ModelDims,
    c: &ResNetConfig,
    tokens: Var,
    batch: usize,
    mode: &mut Mode<'_>,
    stats: &mut Vec<(Vec<f64>, Vec<f64>, usize)>,
) -> Result<Var> {
    let x = combine(g, tokens, batch, dims.d, dims.combine);
    let mut x = p.linear(g, "input", x);
    for i in 0..c.layers {
        let z = p.batch_norm(g, &format!("blocks.{i}.norm"), x, mode, stats)?;
        let z = p.linear(g, &format!("blocks.{i}.linear1"), z);
        let z = g.relu(z);
        let z = mode.dropout(g, z, c.hidden_dropout)?;
        let z = p.linear(g, &format!("blocks.{i}.linear2"), z);
        let z = mode.dropout(g, z, c.residual_dropout)?;
        x = g.add(x, z);
    }
    let z = p.batch_norm(g, "head_norm", x, mode, stats)?;
    let z = g.relu(z);
    Ok(p.linear(g, "head", z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, TopModel};
    use crate::numerics::Tensor;
    use crate::objective::CombineMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            k: 4,
            d: 2,
            out: 3,
            combine: CombineMode::Average,
        }
    }

    #[test]
    fn default_sizes() {
        let m = TopModel::init(ModelConfig::Resnet(ResNetConfig::default()), dims(), 0).unwrap();
        assert_eq!(m.param("input.weight").unwrap().shape(), &[4, 168]);
        assert_eq!(m.param("blocks.0.linear1.weight").unwrap().shape(), &[168, 487]);
        assert_eq!(m.param("head.weight").unwrap().shape(), &[168, 3]);
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let cfg = ResNetConfig {
            layers: 1,
            layer_size: 3,
            hidden_factor: 2.0,
            hidden_dropout: 0.0,
            residual_dropout: 0.0,
        };
        let mut m = TopModel::init(ModelConfig::Resnet(cfg.clone()), dims(), 0).unwrap();
        m.param_mut("blocks.0.linear2.weight").unwrap().data_mut().fill(0.0);
        let mut reference = TopModel::init(ModelConfig::Resnet(ResNetConfig { layers: 0, ..cfg }), dims(), 0).unwrap();
        for name in [
            "input.weight",
            "input.bias",
            "head_norm.weight",
            "head_norm.bias",
            "head.weight",
            "head.bias",
        ] {
            let src = m.param(name).unwrap().clone();
            *reference.param_mut(name).unwrap() = src;
        }
        let tokens = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let run = |m: &TopModel| {
            let mut g = Graph::new();
            let vars = m.bind(&mut g);
            let t = g.leaf(&tokens);
            let f = m.forward(&mut g, &vars, t, 2, &mut Mode::Eval).unwrap();
            g.value(f.output).to_vec()
        };
        assert_eq!(run(&m), run(&reference));
    }

    #[test]
    fn single_row_training_batch_rejected() {
        let m = TopModel::init(ModelConfig::Resnet(ResNetConfig::default()), dims(), 0).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let t = g.leaf(&Tensor::zeros(vec![2, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.forward(&mut g, &vars, t, 1, &mut Mode::Train(&mut rng)).is_err());
        assert!(m.forward(&mut g, &vars, t, 1, &mut Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = TopModel::init(ModelConfig::Resnet(ResNetConfig::default()), dims(), 0).unwrap();
        let w = 168;
        let stats: Vec<_> = (0..4).map(|_| (vec![1.0; w], vec![2.0; w], 3)).collect();
        m.update_running_stats(&stats);
        let s = &m.batch_norm_states()[0];
        assert!((s.mean[0] - 0.1).abs() < 1e-15);
        assert!((s.var[0] - (0.9 + 0.1 * 3.0)).abs() < 1e-15);
    }
}
