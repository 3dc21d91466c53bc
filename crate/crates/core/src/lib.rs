//! CobNet: few-shot segmentation that mines background prototypes from the
//! query image itself, with a self-contained 64-bit tensor engine, a frozen
//! seeded backbone, a synthetic episodic dataset, training, and evaluation.

pub mod backbone;
pub mod cam;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod mbm;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod proto;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Mask, Tensor};
