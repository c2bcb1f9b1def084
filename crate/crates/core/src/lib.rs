//! Genealogy-valued branching processes on finite ultrametric measure spaces.
//!
//! States are weighted dendrogram forests ([`umspace::Forest`]). The crate
//! provides the truncation/concatenation algebra, polynomial test
//! functionals, individual-based simulation of the genealogy-valued Feller
//! diffusion and its spatial (marked) version, and the coalescent dual with
//! Feynman-Kac weights.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod coalescent_dual;
mod error;
pub mod feller_sim;
pub mod math;
pub mod polynomials;
pub mod rng;
pub mod spatial_sim;
pub mod stats;
pub mod umspace;

#[cfg(test)]
extern crate std;

pub use error::{Error, Result};
pub use umspace::{DistanceMatrix, Forest, Ums};
