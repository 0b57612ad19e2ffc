//! Stochastic unravelings of the regularized Schrödinger–Newton equation on
//! a periodic lattice, with a dense master-equation oracle to check them
//! against.
//!
//! The pieces, bottom up: [`lattice`] (grids, states, transforms),
//! [`kernels`] (rate kernels and the self-gravity potential),
//! [`propagator`] (deterministic flow), [`pdp`] and [`diffusive`] (the two
//! unravelings), [`master`] (the averaged dynamics), [`ensemble`]
//! (reproducible Monte Carlo), and [`config`], [`io`], [`run`] for the
//! command line.

pub mod config;
pub mod diffusive;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod kernels;
pub mod lattice;
pub mod master;
pub mod pdp;
pub mod propagator;
pub mod run;
pub mod spectral;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/lattice.md")]
    pub mod lattice {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    pub mod kernels {}
    #[doc = include_str!("../../../book/src/drift.md")]
    pub mod drift {}
    #[doc = include_str!("../../../book/src/jumps.md")]
    pub mod jumps {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod diffusion {}
    #[doc = include_str!("../../../book/src/master.md")]
    pub mod master {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    pub mod ensembles {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
