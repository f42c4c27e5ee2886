//! Optimistic exploration for finite-horizon MDPs.
//!
//! Confidence sets around an empirical transition model are described by a
//! divergence; optimism over such a set is equivalent to dynamic programming
//! with an exploration bonus given by the divergence's conjugate. This crate
//! provides the divergences and their conjugate bonuses, optimistic DP for
//! tabular MDPs, LSVI-UCB for factored linear MDPs, a regret harness and a
//! set of brute-force oracles that certify the duality claims at small scale.

pub mod divergence;
pub mod error;
pub mod harness;
pub mod linear;
pub mod mdp;
pub mod oracles;
pub mod tabular;
pub mod verify;

pub use error::{Error, Result};
