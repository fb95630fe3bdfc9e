//! Continual self-supervised pre-training workbench for audio-like token
//! features: a clustered codebook tokenizer with anti-collapse updates,
//! self-distillation anchors against a frozen snapshot, and stratified
//! retrieval of stage data from task, general and adaptive pools.

pub mod codebook;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod sampler;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/domains.md")]
    mod domains {}
    #[doc = include_str!("../../../book/src/codebook.md")]
    mod codebook {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/forgetting.md")]
    mod forgetting {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
