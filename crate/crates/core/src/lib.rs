//! Multi-source domain generalization by merging per-source fine-tuned
//! cosine-prototype classifiers.
//!
//! Each source starts from one shared initialization `θ0` and trains with
//! adaptive source enrichment and a sign-alignment penalty toward the
//! running mean update. A Beta-weighted historical average of its trajectory
//! is kept, and the averaged models are merged by a global magnitude trim
//! followed by a disjoint mean.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod merge;
pub mod model;
pub mod params;
pub mod train;

pub use config::{MergeConfig, ModelConfig, RunConfig};
pub use data::{generate, DataConfig, Dataset, DomainSpec, Sample, SplitPair};
pub use error::{HamError, Result};
pub use eval::{leave_one_out_run, sweep, EvalConfig, ExperimentReport, Knob, Row, SweepReport};
pub use merge::{merge, MergeInput, MergeReport, MergeStrategy, TrimLevel};
pub use model::{CosineClassifier, EncoderConfig, Prototypes};
pub use params::{BitMask, FlatLayout, FlatVec, ParamSet, Tensor};
pub use train::{train_all, HarmonyConfig, SignMode, TrainOptions, TrainOutput};
