//! The guide in `book/` has runnable snippets. mdbook cannot link them
//! against this workspace, so each chapter is pulled in here as the docs of
//! an empty module and `cargo test --doc -p moge-book` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/routing.md")]
pub mod routing {}
#[doc = include_str!("../../../book/src/regularizer.md")]
pub mod regularizer {}
#[doc = include_str!("../../../book/src/schedule.md")]
pub mod schedule {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
