//! Progressive differentiable architecture search at desk scale.
//!
//! A supernetwork of cells whose edges mix eight candidate operations is
//! trained in stages of growing depth. After each stage the weakest
//! candidates on every edge are dropped, so deeper networks search a smaller
//! space. Dropout on skip connections and a cap on the number of derived skip
//! connections keep parameter-free operations from taking over the cell.
//!
//! Module map:
//! - [`ops`]: candidate operations and the mixed edge
//! - [`supernet`]: search cells and the search network
//! - [`search`]: stage plans, the bilevel training loop, candidate pruning
//! - [`genotype`]: snapshots, derivation, skip refinement, file formats
//! - [`eval`]: discrete networks and their training
//! - [`experiments`]: the diagnostic studies
//! - [`opcheck`]: finite-difference checks of the candidate operations
//! - [`data`], [`config`], [`run`], [`cli`]: datasets, configuration, run
//!   directories and the command line

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod genotype;
pub mod nn;
pub mod opcheck;
pub mod ops;
pub mod optim;
pub mod run;
pub mod search;
pub mod seed;
pub mod supernet;

pub use error::{Error, Result};
