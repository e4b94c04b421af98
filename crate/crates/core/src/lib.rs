//! Multi-focus image fusion with a gradient-aware cascade network.
//!
//! The crate is organised bottom-up: [`tensor`] provides the autodiff engine,
//! [`net`] the architecture, [`losses`] the training objective, [`datagen`]
//! and [`trainer`] the training pipeline, [`stack`] focal-stack fusion and
//! [`metrics`] the evaluation side.

pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod imgproc;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod stack;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use net::{FusionConfig, FusionNet, WeightStore};
pub use tensor::{Gradients, Tape, Tensor, Var};
