//! Next-location prediction with a mixture-of-experts transformer that grows
//! one city at a time, using generative replay and self-distillation instead
//! of stored data, plus audits of what generated trajectories leak.
//!
//! The guide in `book/` walks through the pieces.

pub mod autograd;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod privacy;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/continual.md")]
    mod continual {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/privacy.md")]
    mod privacy {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
