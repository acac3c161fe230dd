//! Data-free model folding: cluster similar channels with k-means, merge them,
//! and repair the activation statistics the merge disturbs.

// Index loops are the clearer form for the paired-array numeric kernels here.
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod cli;
pub mod clustering;
pub mod folding;
pub mod harness;
pub mod nn;
pub mod repair;
pub mod tensor;
