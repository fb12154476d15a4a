//! Multi-resolution training of spatial tensor classifiers.
//!
//! A full-rank weight tensor is trained over a sequence of increasingly fine
//! spatial grids, factorized into a low-rank plus sparse CP model, and the
//! factors are trained on at the finer grids. Transitions between grids are
//! driven by statistics of the per-cell gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod gradstats;
pub mod grid;
pub mod model;
pub mod mrtl;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use data::{DatasetMeta, RawDataset, Record, SyntheticSpec};
pub use error::{Error, Result};
pub use gradstats::{CriterionConfig, CriterionKind, GradStatsBuffer, GroupStats, Grouping};
pub use grid::{FeatureVector, Grid, Point, RefinementMap};
pub use model::{AnyModel, Example, FactoredModel, FullTensorModel, RegConfig, SpatialModel};
pub use mrtl::{
    mrtl_train, train_fixed, Control, EvalEvent, Observer, Phase, ResolutionSchedule, RunOptions, StageRecord,
    StopReason, TrainConfig, TrainReport,
};
pub use optim::OptimizerConfig;
pub use tensor::{CpFactors, DenseTensor3, Mat};
