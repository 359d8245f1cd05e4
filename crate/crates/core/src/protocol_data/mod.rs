//! Continual-learning protocol: step schedules, class orders, the synthetic
//! scene generator, per-step filtering and relabelling, and IoU evaluation.

pub mod cache;
mod metrics;
mod schedule;
mod step_data;
mod synth;

pub use metrics::{argmax_channels, evaluate, Confusion, IoUReport};
pub use schedule::{
    build_domain_schedule, build_schedule, class_orders, joint_schedule, parse_notation, Labeling, ScheduleMode,
    TaskSchedule, CLASS_ORDERS,
};
pub use step_data::{filter_and_relabel, joint_dataset, to_channels, StepDataset};
pub use synth::{class_color, generate_pool, generate_scene, split_holdout, Scene, SynthSceneSpec};
