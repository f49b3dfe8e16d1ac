//! The guide's chapters double as doctests: every fenced Rust block in
//! `book/src/*.md` is compiled and run by `cargo test --doc`, so the book
//! cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/signals.md")]
mod signals {}

#[doc = include_str!("../../../book/src/spectra.md")]
mod spectra {}

#[doc = include_str!("../../../book/src/simulation.md")]
mod simulation {}

#[doc = include_str!("../../../book/src/discretization.md")]
mod discretization {}

#[doc = include_str!("../../../book/src/estimation.md")]
mod estimation {}

#[doc = include_str!("../../../book/src/detection.md")]
mod detection {}
