//! Experiment definitions: the 2-D grid, tiny enumerable instances, a
//! two-class binary-pattern task and token dataset files.

mod dataset;
mod digits;
mod grid;
mod tiny;

pub use dataset::{load_dataset, save_dataset, TokenDataset};
pub use digits::{LogisticTemplateReward, TwoClassTask};
pub use grid::{GridRelaxation, GridReward, GridTask};
pub use tiny::TinyTask;
