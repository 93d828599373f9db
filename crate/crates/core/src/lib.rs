//! Multimodal reach-prediction pipeline: synthetic recording generation,
//! windowing, fusion models over face/motion/depth streams, training,
//! statistical analysis, and stream replay.

pub mod analysis;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod reference;
pub mod region;
pub mod replay;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use region::{Region, ShelfColumn, REGIONS};
