//! Segmentation under noisy labels with joint class and affinity loss
//! correction.
//!
//! Generic over `f32`/`f64` through [`Scalar`]; `*64` aliases cover the
//! common case.

pub mod affinity;
pub mod checks;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod grid_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod ntm;
pub mod scalar;
pub mod seed;

pub use affinity::{affinity_map, dar_refine, reverse_affinity, AffinityMap};
pub use dataset::{gen_shapes, Sample, ShapesConfig, Splits};
pub use error::{Error, Result};
pub use grid::{one_hot, FeatureMap, LabelMap, OneHotMap, ProbMap};
pub use grid_io::{read_grid, write_grid, Grid, GridData};
pub use losses::{
    affinity_bce, affinity_corrected_loss, cacr, ce_loss, class_corrected_loss, joint_loss, LossBundle, PairLabels,
    Wrt,
};
pub use metrics::{dice_jaccard, SegMetrics};
pub use model::{train, Mode, ModelParams, TrainConfig, TrainHistory};
pub use noise::{corrupt, noise_rates, NoiseReport, NoiseSpec};
pub use ntm::{
    mc_translate_oracle, translate_closed_form, translate_exact, AffinityNtm, ClassDistribution, ClassNtm, NtmParams,
};
pub use scalar::Scalar;

pub type ProbMap64 = ProbMap<f64>;
pub type ProbMap32 = ProbMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
pub type FeatureMap32 = FeatureMap<f32>;
pub type AffinityMap64 = AffinityMap<f64>;
pub type AffinityMap32 = AffinityMap<f32>;
pub type ClassNtm64 = ClassNtm<f64>;
pub type ClassNtm32 = ClassNtm<f32>;
pub type AffinityNtm64 = AffinityNtm<f64>;
pub type AffinityNtm32 = AffinityNtm<f32>;
