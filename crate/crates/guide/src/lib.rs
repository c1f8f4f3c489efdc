//! The book under `book/`, compiled as documentation so every fenced Rust
//! block in the chapters is a doc-test. `cargo test -p umcmc-guide` is the
//! check that the book's code actually runs against the current library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/targets.md")]
pub mod targets {}

#[doc = include_str!("../../../book/src/coupled-chains.md")]
pub mod coupled_chains {}

#[doc = include_str!("../../../book/src/estimator.md")]
pub mod estimator {}

#[doc = include_str!("../../../book/src/control-variates.md")]
pub mod control_variates {}

#[doc = include_str!("../../../book/src/variance-bound.md")]
pub mod variance_bound {}

#[doc = include_str!("../../../book/src/finite-chains.md")]
pub mod finite_chains {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
