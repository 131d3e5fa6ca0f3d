//! Federated learning with per-client mixtures of experts.
//!
//! A global model is trained with federated averaging on the data of
//! clients that opt in. Every client, opted in or not, then fine-tunes a
//! copy of it into a local specialist and finally trains a gate that
//! blends specialist and frozen global model per input:
//!
//! ```text
//! y = h(x) * f_specialist(x) + (1 - h(x)) * f_global(x)
//! ```
//!
//! The [`data`] module builds non-iid client populations, [`federation`]
//! runs the averaging protocol, [`personalization`] trains specialists
//! and mixtures, and [`evaluation`] compares them against local-only and
//! federated baselines.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod nn;
pub mod personalization;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/personalization.md")]
    mod personalization {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
