//! Noise-tolerant adaptation of a zero-shot classifier from a handful of
//! unlabeled embeddings.
//!
//! The pipeline: pseudo-label the unlabeled features with the zero-shot
//! classifier, keep the most confident `k` per class, store them in a
//! confidence-weighted key-value cache, overwrite values and weights with a
//! stronger teacher's predictions, then fine-tune the cache keys with a
//! cross-entropy loss reweighted by each sample's affinity to its class
//! prototype.
//!
//! All numerical routines are generic over [`Scalar`] (`f32` or `f64`);
//! stored matrices are binary32. The aliases below fix the precision used by
//! the command-line tool.

// `!(x > 0)` style checks are deliberate: they reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod cache;
pub mod data_store;
pub mod error;
pub mod evaluation;
pub mod prototypes;
pub mod pseudo_labeling;
pub mod scalar;
pub mod synthetic;
pub mod trainer;

pub use bundle::Bundle;
pub use cache::{adapter_logits, build_cache, cache_logits, phi, refine_cache, RowOrigin, WeightedCache};
pub use data_store::{BundleManifest, ClassifierWeights, EmbeddingSet, GroundTruthLabels, FORMAT_VERSION};
pub use error::{NtuaError, Result};
pub use evaluation::{
    evaluate, run_ablation, run_ablation_seeds, run_pipeline, run_variant, AblationResult, EvalReport,
    InferenceWeights, PipelineConfig, Variant,
};
pub use prototypes::{affinity_weights, compute_prototypes, AffinityWeights, PrototypeSet};
pub use pseudo_labeling::{
    fallback_rows, make_pseudo_labels, select_top_k, softmax_probs, zero_shot_logits, LabelSource, PseudoLabelSet,
    ShotSelection,
};
pub use scalar::Scalar;
pub use synthetic::{generate, verify_figure4_shape, SynthSpec};
pub use trainer::{
    adamw_step, cosine_lr, loss_grad_keys, train_keys, weighted_ce_loss, AdamW, TrainConfig, TrainReport,
};

/// Working precision for training and the command-line pipeline.
pub type Real = f64;
pub type Cache = WeightedCache<Real>;
pub type Cache32 = WeightedCache<f32>;
pub type PseudoLabels = PseudoLabelSet<Real>;
pub type Prototypes = PrototypeSet<Real>;
pub type Omega = AffinityWeights<Real>;
