//! Neural execution engines: masked transformers trained on algorithm traces
//! to execute sorting, merging, addition and graph subroutines step by step.

pub mod harness;
pub mod model;
pub mod numeral;
pub mod numerics;
pub mod traces;
pub mod workbench;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/numbers.md")]
    mod numbers {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/engines.md")]
    mod engines {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/composition.md")]
    mod composition {}
    #[doc = include_str!("../../../book/src/workbench.md")]
    mod workbench {}
}
