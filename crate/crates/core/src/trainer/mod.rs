//! Optimization and data pipeline.

pub mod augment;
pub mod config;
pub mod data;
pub mod lars;
pub mod loops;
pub mod schedule;

pub use augment::{augment_view, crop_resize, flip_horizontal, two_view, AugmentPolicy, ViewDist};
pub use config::{AdaptConfig, Config, DataConfig, ErfConfig, ExportConfig, OptimConfig, PretrainConfig, QueueConfig};
pub use data::{synth_dataset, synth_image, Dataset, ImageMeta, ShapeKind, ShapeMeta};
pub use lars::{lars_step, trust_ratio, LarsConfig, LarsState};
pub use loops::{
    distill, eval_pixel_cosine, pixel_cosine, pretrain_teacher, DistillOptions, DistillOutput, PretrainOutput, StepMetrics,
};
pub use schedule::{lr_schedule, peak_lr, step_plan, StepPlan};
