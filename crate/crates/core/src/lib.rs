//! Ultra-sparse memory layers for transformer language models.

pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod linalg;
pub mod lm;
pub mod multicore;
pub mod pkm;
pub mod select;
pub mod tensor;
pub mod tucker;
pub mod verify;
pub mod ultramem;
pub mod virtual_memory;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
