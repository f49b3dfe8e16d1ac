//! Frequency-domain toolkit for probing nonlinear systems with periodic
//! excitations.
//!
//! The crate covers the full chain of a nonparametric frequency response
//! study:
//!
//! * [`signals`] — design and realize random-phase multisines, periodic
//!   noise, and Gaussian (process/measurement) noise sources.
//! * [`spectra`] — scaled DFT, multi-period/multi-realization ensembles,
//!   and sample statistics over periods and realizations.
//! * [`volterra`] — simulate finite-degree Volterra systems in open and
//!   closed loop with process noise, and discretize continuous-time
//!   kernels exactly under zero-order-hold input.
//! * [`bla`] — estimate the best linear approximation (BLA) of a
//!   nonlinear system together with a split of its variance into a
//!   noise part and a nonlinear-distortion part (robust, fast, and
//!   local-polynomial methods).
//! * [`detect`] — classify nonlinear behavior from experiments at
//!   several reference powers (input-output vs. input-noise interaction).
//! * [`nfir`] — closed-form ground truth for the nonlinear FIR feedback
//!   benchmark used throughout the test suite.
//! * [`io`] — file formats (JSON containers, CSV tables) shared with the
//!   command-line front end.
//!
//! A walkthrough with runnable examples lives in the `book/` directory of
//! the repository; its code snippets are compiled as doctests of this
//! crate, so the guide cannot drift from the library.

pub mod bla;
pub mod detect;
pub mod error;
pub mod io;
pub mod nfir;
pub mod signals;
pub mod spectra;
pub mod volterra;

pub use error::{Error, Result};

mod rng;

#[cfg(doctest)]
mod book;
