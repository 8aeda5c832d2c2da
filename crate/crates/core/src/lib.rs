//! Promptable human-parsing toolkit.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`archive`] / [`lora`] — named-tensor storage and low-rank adapter merging
//! * [`schedule`] / [`backbone`] — diffusion noise schedule and the frozen
//!   feature extractor (single forward pass, no iterative denoising)
//! * [`tape`] — small reverse-mode autodiff used by the trainable head
//! * [`head`] — pixel decoder + query transformer producing mask sets and
//!   per-mask embeddings
//! * [`losses`] — Hungarian matching, point-sampled BCE/Dice, and the
//!   caption-grounding contrastive loss
//! * [`prompts`] — phrase extraction, text embedding, ensembles
//! * [`eval`] — four-protocol segmentation metrics and reports
//! * [`synth`], [`dataset`], [`train`], [`infer`], [`viz`], [`config`] —
//!   the synthetic data pipeline the CLI binds together

pub mod archive;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod head;
pub mod infer;
pub mod lora;
pub mod losses;
pub mod nn;
pub mod prompts;
pub mod sample;
pub mod synth;
pub mod schedule;
pub mod tape;
pub mod train;
pub mod util;
pub mod viz;

pub use archive::{Dtype, TensorArchive};
pub use backbone::{Backbone, BackboneConfig, Context, FeatureBundle};
pub use dataset::{
    load_dataset, load_dataset_named, load_predictions, save_dataset, save_predictions,
};
pub use error::{Error, Result};
pub use eval::{
    build_protocol_gt, evaluate_dataset, gamma_correct, instance_metrics, semantic_ap,
    semantic_metrics, unseen_split, EvalOptions, ImagePrediction, MetricReport, PredInstance,
    Protocol, UnificationMap,
};
pub use head::{HeadConfig, HeadOutput, HeadParams, MaskSet};
pub use lora::{merge_lora, merge_model, LoraAdapter, NamedAdapter};
pub use losses::{grounding_loss, hungarian, matched_mask_loss, sample_points, LossWeights};
pub use prompts::{
    ebp_labels, embed_prompts, extract_phrases, EnsembleTable, Lexicon, PromptSet, TextEmbedder,
};
pub use sample::{Instance, LabeledSample};
pub use synth::{generate_synthetic_dataset, SynthOptions, Vocab};
pub use schedule::{noisy_latent, NoiseSchedule};
pub use tape::{Gradients, Tape, Var};
pub use infer::{assign_labels, eval_dims, merge_fpp, InferenceEngine, PromptUniverse};
pub use train::Trainer;
pub use viz::{visualize_masks, ColorLegend};
pub use config::RunConfig;
