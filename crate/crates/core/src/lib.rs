//! Explanations for open-ended answers of vision-language models.
//!
//! The pipeline scores every answer token with and without visual
//! information, keeps the tokens whose log-likelihood ratio shows they depend
//! on the image, and optimizes a per-pixel mask that explains the cumulative
//! log-likelihood of those tokens. Heatmaps are then scored with normalized
//! deletion/insertion curves.
//!
//! Models plug in through [`model::ModelAdapter`]; [`model::ToyModel`] is a
//! small deterministic reference implementation.

pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod optimizer;
pub mod relevance;
pub mod types;

pub use error::{Error, Result};
pub use evaluation::{
    compare_heatmaps, filter_vision_dependent, normalize_score, perturbation_curve,
    probability_drop, reliance_stats, ComparisonScores, RelianceStats, SampleDrop,
};
pub use masking::{
    apply_mask, apply_mask_multiencoder, apply_mask_multires, crop_multires, make_baseline,
    upsample_mask, CropLayout, Patch,
};
pub use model::{
    conditional_logprobs, generate, score_gradient, Capabilities, CountingAdapter, ModelAdapter,
    ToyModel, Window,
};
pub use optimizer::{
    btv_norm, objective_single, optimize, optimize_separate_masks, optimize_single_mask,
    ObjectiveBreakdown, OptimizationTrace,
};
pub use relevance::{
    compute_llr, joint_probability_score, prediction_score, select_crucial_tokens,
    RelevanceReport,
};
pub use types::{
    validate_sample, BaselineImage, BaselineKind, CurveDirection, EvaluationCurve, Image, Mask,
    OptimizationConfig, OptimizationMode, ScorableSample, TokenRecord,
};
