//! Finite measured real trees, Poisson cutting of Brownian-CRT approximations,
//! cut-tree genealogies, the reverse shuffle transformations, and the Monte
//! Carlo statistics used to check their distributional identities.
//!
//! The crate is organised around a handful of submodules:
//!
//! * [`tree`] — rooted measured real trees with edge lengths and atom masses,
//!   plus the deterministic surgery primitives (span, fringe, detach/reattach).
//! * [`sampler`] — excursion-based and line-breaking samplers for finite
//!   approximations of the Brownian continuum random tree, and the Rayleigh
//!   reference law.
//! * [`cutting`] — the Poisson rain of cuts on the skeleton, the partition
//!   genealogy backbone, and assembly/refinement of k-cut trees.
//! * [`shuffle`] — one-path reversals, k-shuffles, attach-choice sampling,
//!   consistent-leaf construction and the direct shuffle.
//! * [`frag`] — the mass-partition Markov chain, its continuous-time
//!   fragmentation counterpart, critical-exponent estimation and
//!   concentration reports.
//! * [`stats`] — Kolmogorov–Smirnov and permutation energy tests,
//!   distance-matrix sampling, and the spine decomposition checks.
//! * [`experiments`] — named, seed-reproducible experiments tying everything
//!   together; used by the CLI and by the acceptance test suite.

pub mod cutting;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod frag;
pub mod sampler;
pub mod shuffle;
pub mod stats;
pub mod tree;

pub use error::{Error, Result};
pub use tree::{DistanceMatrix, MeasuredTree, NodeId, TreePoint};
