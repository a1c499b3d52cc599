//! A unified video-language transformer where a single masked-language-modeling
//! head answers every task.
//!
//! Start with [`synthgen`] for data, [`tasks`] for how each task becomes a
//! masked example, and [`trainer`] for the training loops. The guide in
//! `book/` covers the same ground with runnable snippets.

pub mod model;
pub mod tensor;
pub mod text;
pub mod vision;
pub mod tasks;
pub mod synthgen;
pub mod metrics;
pub mod trainer;
pub mod cli;

// Compile and run the guide's snippets with `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
