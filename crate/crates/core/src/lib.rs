//! Multi-channel ensemble transfer learning for 3-class chest X-ray screening:
//! curation, sampling, models, training, and evaluation.

pub mod checkpoint;
pub mod curation;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod training;
pub mod tsv;

pub use checkpoint::{load_model, CheckpointMeta, SavedModel};
pub use curation::{
    apply_exclusions, compose_dataset, deduplicate, ingest_sources, Collection, CurationReport, DatasetManifest,
    ExclusionList, ImageRecord, RawLabel, Scheme, SourceSpec,
};
pub use error::{Result, XensError};
pub use evaluation::{
    aggregate_folds, classification_metrics, confusion_matrix, format_mean_std, pooled_t_test, ppv_true_class,
    EvalReport, FoldAggregate, Metrics, TTestResult,
};
pub use model::{
    assemble_ensemble, attach_head, build_extractor, strip_and_freeze, ArchSpec, ClassificationHead, ClassifierModel,
    EnsembleModel, ExtractorInit, FeatureExtractor, Network, TrainableScope,
};
pub use nn::{Tensor, TinyConfig};
pub use pipeline::{run_pipeline, DataContext, PipelineConfig, RunLayout};
pub use sampling::{
    augment, epoch_batches, holdout_split, make_folds, oversample_weights, AugmentationConfig, FoldPlan,
    SamplingPlan, SplitPlan,
};
pub use training::{class_weights, fit, weighted_cross_entropy, ClassWeights, TrainConfig, TrainingHistory};
