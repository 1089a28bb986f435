pub mod ablation;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod pipeline;
pub mod planner;
pub mod selection;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
