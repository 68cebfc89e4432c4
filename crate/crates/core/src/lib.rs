pub mod config;
pub mod error;
pub mod flow;
pub mod grid;
pub mod latentwarp;
pub mod mediaio;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tokenmerge;
pub mod toydiff;
pub mod video;

pub use config::Config;
pub use error::{Error, Result};
pub use grid::Grid;
pub use video::FrameSequence;
