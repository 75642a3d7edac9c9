//! Discriminative decision heads trained on logged agent execution traces.
pub mod baselines;
pub mod eval;
pub mod features;
pub mod head;
pub mod pipeline;
pub mod provider;
pub mod ranking;
pub mod strata;
pub mod synth;
pub mod text;
pub mod trace;
pub mod value;

pub use ranking::{Ranking, ScoredCandidate};
pub use value::{FeatureValue, ValueType};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/rankings.md")]
    mod rankings {}
    #[doc = include_str!("../../../book/src/extractors.md")]
    mod extractors {}
    #[doc = include_str!("../../../book/src/head.md")]
    mod head {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
