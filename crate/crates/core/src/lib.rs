pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod prompts;
pub mod pruning;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use config::{AttentionScale, KvPlacement, ModelConfig, PromptConfig};
pub use error::{Error, Result};
pub use model::{count_tunable, ForwardOptions, ForwardOutput, MaskProbe, Model, TunableCount};
pub use prompts::{init_prompts, PromptSet, PruneStage};
pub use tensor::{Precision, Scalar, Tensor};
pub use checkpoint::{Checkpoint, Stage, TensorStore};
pub use data::{Dataset, Prepared, Samples, Split};
pub use embed::{EmbeddingSet, Metric, RecallReport};
pub use pruning::{importance_scores, rewind, segment_prune, token_prune, ImportanceReport};
pub use trainer::{finetune, lr_at, pretrain_backbone, sweep, RunRecord, TrainConfig};
pub use vit::{patchify, Backbone, Head};
