//! Training, evaluation and experiment runners.

pub mod attention;
pub mod config;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod optim;
pub mod plot;
pub mod train;

pub use config::{SmoothingMode, TrainConfig};
pub use data::{read_task_dir, vqa_accuracy, write_task_dir, Example, TaskData};
pub use eval::{evaluate, EvalReport};
pub use model::{Model, ModelSpec};
pub use train::{train, MetricsLog};
