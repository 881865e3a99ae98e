//! A desk-scale CLIP-style dual encoder with a low-rank adaptation engine for
//! few-shot image classification.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations used for training (`f32`) and for
//! gradient and oracle checks (`f64`).

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod lora;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use autodiff::{AttentionLayout, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{
    tokenize_prompt, AttnMatrix, AttnTarget, ClassPrompt, DualEncoderModel, EncoderKind, ModelConfig, ParamId, ParamStore, Vocabulary,
};
pub use fewshot::{
    evaluate, finetune_lora, posterior, predict, sample_support_set, zero_shot_logits, Classifier, FewShotTask, ImageSet, LogitMatrix,
    PosteriorMatrix, TrainConfig, TrainingHistory,
};
pub use lora::{init_lora, inject, lora_forward, AdaptedModel, EncoderChoice, LayerSpan, LoraModule, MatrixGroup, PlacementConfig};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = DualEncoderModel<f32>;
pub type Model64 = DualEncoderModel<f64>;
pub type Adapted32 = AdaptedModel<f32>;
pub type Adapted64 = AdaptedModel<f64>;
