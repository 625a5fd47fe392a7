//! Concept classifier and the erase/preserve metric trio.

pub mod classifier;
pub mod evaluate;
pub mod metrics;

pub use classifier::{
    train_classifier, ClassifierConfig, ClassifierReport, ClassifierWeights, ImageFeatures,
};
pub use evaluate::{EvalProtocol, EvalReport, Evaluator, MetricSet, Side};
pub use metrics::{classify_accuracy, frechet_distance, perceptual_distance, spearman};
