//! Unbiased MCMC estimation from coupled Markov chains, with Stein control
//! variates and a certifiable bound on the estimator's standard deviation.
//!
//! The estimator runs two chains that share a target and meet exactly after a
//! random number of steps; a bias-correction term built from the pre-meeting
//! trajectory removes the burn-in bias entirely, so independent replicates can
//! be averaged across as many workers as are available. On top of that sit
//! score-function control variates fitted per coordinate ([`cv`]) and an
//! a-priori standard-deviation bound whose premises can be checked — and in
//! small finite-state cases evaluated exactly — by the certification harness
//! ([`bound`], [`discrete`]).
//!
//! The guide in `book/` walks through the pieces in order; its code blocks are
//! compiled as the `umcmc-guide` doc-tests, so they stay honest. For batch
//! use, the `umcmc` binary drives everything from a TOML config: `umcmc run`,
//! `umcmc certify`, `umcmc meeting-times`, and `umcmc fit-cv`.

pub mod bound;
pub mod config;
pub mod coupling;
pub mod cv;
pub mod discrete;
pub mod estimator;
pub mod harness;
mod linalg;
pub mod output;
pub mod rkhs;
pub mod rng;
pub mod target;
