//! Channel-selecting self-attention for identity retrieval: a small autodiff
//! tape, attention blocks with differentiable channel masks, an information
//! bottleneck surrogate with a provable upper bound, retrieval metrics, a
//! synthetic identity dataset, and the training/search harnesses gluing them
//! together.

pub mod attention;
pub mod data;
pub mod dnas;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ib;
pub mod loss;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
