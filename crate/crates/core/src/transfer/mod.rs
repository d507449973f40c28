//! Pre-training, transfer of feature tokens to a downstream schema,
//! fine-tuning and the token-library re-weighting variant.

mod checkpoint;
mod config;
mod network;
mod pipeline;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{PipelineConfig, StageConfig};
pub use network::{Network, Reweight, PREDICT_CHUNK};
pub use pipeline::{
    build_finetune_tokenizer, finetune, mean_token, pretrain, reweight_finetune, train_from_scratch, Stage, StageSeeds,
    TrainRecord,
};
pub use train::{argmax, objective_value, score, train, Supervision, TrainLog, TrainSpec};
