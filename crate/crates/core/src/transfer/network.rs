use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Cell, DatasetTable};
use crate::error::{bail, Result};
use crate::models::{Forward, Mode, TopModel};
use crate::numerics::{AdamW, Gradients, Graph, ParamSlot, Tensor, Var};
use crate::parallel;
use crate::tokenizer::{kaiming_uniform, FeatureTokenizer};

/// Rows evaluated per graph during inference.
pub const PREDICT_CHUNK: usize = 256;

/// Token table built as `W · (library ∥ new)`: the library rows are frozen
/// pre-trained tokens, `new` holds extra learnable tokens and `W` has one row
/// per downstream token row.
#[derive(Clone, Debug, PartialEq)]
pub struct Reweight {
    pub library: Tensor,
    pub new_tokens: Option<Tensor>,
    pub weights: Tensor,
}

impl Reweight {
    /// `W` starts uniform at `1/(L + n)`; new tokens are Kaiming-uniform.
    pub fn init(library: Tensor, n_new: usize, target_rows: usize, seed: u64) -> Result<Self> {
        let k = library.row_len();
        let total = library.rows() + n_new;
        let new_tokens = if n_new == 0 {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(Tensor::new(vec![n_new, k], kaiming_uniform(n_new * k, k, &mut rng))?.requires_grad(true))
        };
        let weights =
            Tensor::new(vec![target_rows, total], vec![1.0 / total as f64; target_rows * total])?.requires_grad(true);
        Ok(Self {
            library: library.requires_grad(false),
            new_tokens,
            weights,
        })
    }

    pub fn n_new(&self) -> usize {
        self.new_tokens.as_ref().map_or(0, Tensor::rows)
    }

    fn bind(&self, g: &mut Graph) -> (Var, Option<Var>, Var) {
        let lib = g.leaf(&self.library);
        let new = self.new_tokens.as_ref().map(|t| g.leaf(t));
        let w = g.leaf(&self.weights);
        let stacked = match new {
            Some(n) => g.concat_rows(lib, n),
            None => lib,
        };
        (g.matmul(w, stacked), new, w)
    }

    /// Current `W · (library ∥ new)`.
    pub fn materialize(&self) -> Vec<f64> {
        let mut g = Graph::new();
        let (table, _, _) = self.bind(&mut g);
        g.value(table).to_vec()
    }
}

/// Tokenizer, optional re-weighting, and top-layer model.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub tokenizer: FeatureTokenizer,
    pub reweight: Option<Reweight>,
    pub model: TopModel,
}

pub(crate) struct Bindings {
    table: Var,
    tokenizer_leaf: bool,
    new_tokens: Option<Var>,
    weights: Option<Var>,
    model: Vec<Var>,
}

pub(crate) struct BatchForward {
    pub forward: Forward,
    /// Input tokens `[B·d, k]`.
    pub tokens: Var,
    pub bindings: Bindings,
}

impl Network {
    pub fn new(tokenizer: FeatureTokenizer, reweight: Option<Reweight>, model: TopModel) -> Result<Self> {
        if model.dims.k != tokenizer.k() || model.dims.d != tokenizer.n_features() {
            bail!(
                Contract,
                "model built for k={}, d={} but tokenizer has k={}, d={}",
                model.dims.k,
                model.dims.d,
                tokenizer.k(),
                tokenizer.n_features()
            );
        }
        if let Some(r) = &reweight {
            if r.weights.rows() != tokenizer.n_rows() || r.library.row_len() != tokenizer.k() {
                bail!(Contract, "re-weighting shapes do not match the tokenizer");
            }
        }
        Ok(Self {
            tokenizer,
            reweight,
            model,
        })
    }

    pub(crate) fn forward_rows(&self, g: &mut Graph, rows: &[&[Cell]], mode: &mut Mode<'_>) -> Result<BatchForward> {
        let (table, tokenizer_leaf, new_tokens, weights) = match &self.reweight {
            Some(r) => {
                let (t, n, w) = r.bind(g);
                (t, false, n, Some(w))
            }
            None => (g.leaf(self.tokenizer.table()), true, None, None),
        };
        let tokens = self.tokenizer.forward(g, table, rows.iter().copied())?;
        let model = self.model.bind(g);
        let forward = self.model.forward(g, &model, tokens, rows.len(), mode)?;
        Ok(BatchForward {
            forward,
            tokens,
            bindings: Bindings {
                table,
                tokenizer_leaf,
                new_tokens,
                weights,
                model,
            },
        })
    }

    /// Adds the gradients of one backward pass into every trainable tensor.
    pub(crate) fn accumulate(&mut self, grads: &Gradients, b: &Bindings) -> Result<()> {
        if b.tokenizer_leaf {
            grads.accumulate_into(b.table, self.tokenizer.table_mut())?;
        }
        if let Some(r) = &mut self.reweight {
            if let (Some(v), Some(t)) = (b.new_tokens, r.new_tokens.as_mut()) {
                grads.accumulate_into(v, t)?;
            }
            if let Some(v) = b.weights {
                grads.accumulate_into(v, &mut r.weights)?;
            }
        }
        for (v, p) in b.model.iter().zip(self.model.params_mut()) {
            grads.accumulate_into(*v, &mut p.tensor)?;
        }
        Ok(())
    }

    pub(crate) fn zero_grad(&mut self) {
        self.tokenizer.table_mut().zero_grad();
        if let Some(r) = &mut self.reweight {
            r.weights.zero_grad();
            if let Some(t) = &mut r.new_tokens {
                t.zero_grad();
            }
        }
        self.model.zero_grad();
    }

    /// One optimizer update. Slot order: token table, re-weighting tensors, model parameters.
    pub(crate) fn step(&mut self, opt: &mut AdamW) -> Result<()> {
        let (table, frozen) = self.tokenizer.table_and_frozen();
        let mut slots = vec![ParamSlot::with_frozen_rows(table, frozen)];
        if let Some(r) = &mut self.reweight {
            if let Some(t) = &mut r.new_tokens {
                slots.push(ParamSlot::new(t));
            }
            slots.push(ParamSlot::new(&mut r.weights));
        }
        for p in self.model.params_mut() {
            slots.push(ParamSlot::new(&mut p.tensor));
        }
        opt.step(&mut slots)
    }

    /// Writes the re-weighted table into the tokenizer so it can be exported.
    pub fn materialize_reweight(&mut self) {
        if let Some(r) = &self.reweight {
            let table = r.materialize();
            self.tokenizer.table_mut().data_mut().copy_from_slice(&table);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tokenizer.table().all_finite()
            && self.model.all_finite()
            && self
                .reweight
                .as_ref()
                .is_none_or(|r| r.weights.all_finite() && r.new_tokens.as_ref().is_none_or(Tensor::all_finite))
    }

    /// Eval-mode outputs, flattened `[N, out]`. Chunks run on up to `jobs` threads.
    pub fn predict(&self, table: &DatasetTable, jobs: usize) -> Result<Vec<f64>> {
        self.tokenizer.check_schema(&table.schema)?;
        let chunks: Vec<&[Vec<Cell>]> = table.rows.chunks(PREDICT_CHUNK).collect();
        let outputs = parallel::map(&chunks, jobs, |chunk| {
            let rows: Vec<&[Cell]> = chunk.iter().map(Vec::as_slice).collect();
            let mut g = Graph::new();
            let f = self.forward_rows(&mut g, &rows, &mut Mode::Eval)?;
            Ok(g.value(f.forward.output).to_vec())
        })?;
        Ok(outputs.concat())
    }

    pub fn out_dim(&self) -> usize {
        self.model.dims.out
    }
}
