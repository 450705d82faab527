pub mod autograd;
pub mod data;
pub mod error;
pub mod layers;
pub mod manipulation;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synthesis;
pub mod tensor;

pub use autograd::Var;
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/manipulation.md")]
    mod manipulation {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/config.md")]
    mod config {}
}
