//! Channel folding: discover which blocks share a channel dimension, cluster the
//! channels on a concatenated fold matrix, and rewrite the network with one
//! channel per cluster.
//!
//! Producers (the Dense/Conv2d layers emitting the channels, plus their BatchNorm)
//! fold as cluster means; consumers (every layer reading the channels) fold as
//! cluster sums, because `W U σ(M x) = W σ(C W x)` for the binary assignment `U`.

mod apply;
mod groups;
pub(crate) mod matrix;
mod merge;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterError, KMeansOptions};
use crate::nn::{BlockRef, NnError};

pub use apply::{fold_group, fold_network, fold_network_with, fold_residual_block, FoldStep};
pub use groups::{discover_groups, Consumer, FoldableGroup, GroupKind, GroupSet, Producer};
pub use matrix::{
    build_fold_matrix, flatten_consumer_cols, flatten_producer_rows, unflatten_producer_rows, ColumnBlock, FoldMatrix,
    FoldVariant,
};
pub use merge::{joint_network, merge_networks, weight_matching, MergeLayer, MergeMode, MergeReport};

#[derive(Debug, Error)]
pub enum FoldError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("sparsity {0} must lie in [0, 1)")]
    Sparsity(f64),
    #[error("group {group}: cluster count {k} must lie in 1..={n}")]
    ClusterCount { group: usize, k: usize, n: usize },
    #[error("plan lists {actual} cluster counts for {expected} groups")]
    PlanLength { expected: usize, actual: usize },
    #[error("block {block}: {kind} cannot {role}")]
    Unsupported {
        block: BlockRef,
        kind: &'static str,
        role: &'static str,
    },
    #[error("block {block}: expected {expected} channels, found {actual}")]
    ChannelMismatch {
        block: BlockRef,
        expected: usize,
        actual: usize,
    },
    #[error("group {0} has a producer without BatchNorm but a BatchNorm variant was requested")]
    NoBatchNorm(usize),
    #[error("assignment covers {actual} channels but the group has {expected}")]
    AssignmentSize { expected: usize, actual: usize },
    #[error("architectures differ: {0}")]
    Architecture(String),
    #[error("unfoldable topology: {0}")]
    Topology(String),
}

/// Statistics-correction strategy applied after folding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepairMode {
    Naive,
    Ar,
    Dir,
    Data,
}

impl RepairMode {
    /// Fold-matrix variant for groups carrying BatchNorm.
    pub fn batch_norm_variant(self) -> FoldVariant {
        match self {
            RepairMode::Dir => FoldVariant::BnDir,
            _ => FoldVariant::BnAr,
        }
    }
}

/// Per-group cluster counts, given directly or via a uniform sparsity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldTarget {
    Sparsity(f64),
    Clusters(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub target: FoldTarget,
    pub repair: RepairMode,
    pub seed: u64,
    pub kmeans: KMeansOptions,
}

impl FoldPlan {
    pub fn uniform(sparsity: f64, repair: RepairMode, seed: u64) -> Self {
        Self {
            target: FoldTarget::Sparsity(sparsity),
            repair,
            seed,
            kmeans: KMeansOptions::default(),
        }
    }

    pub fn clusters(ks: Vec<usize>, repair: RepairMode, seed: u64) -> Self {
        Self {
            target: FoldTarget::Clusters(ks),
            repair,
            seed,
            kmeans: KMeansOptions::default(),
        }
    }

    /// Resolves the target cluster count of every group.
    pub fn cluster_counts(&self, groups: &[FoldableGroup]) -> Result<Vec<usize>, FoldError> {
        let ks = match &self.target {
            FoldTarget::Sparsity(s) => groups
                .iter()
                .map(|g| sparsity_to_k(g.channels, *s))
                .collect::<Result<Vec<_>, _>>()?,
            FoldTarget::Clusters(ks) => {
                if ks.len() != groups.len() {
                    return Err(FoldError::PlanLength {
                        expected: groups.len(),
                        actual: ks.len(),
                    });
                }
                ks.clone()
            }
        };
        for (group, (&k, g)) in ks.iter().zip(groups).enumerate() {
            if k == 0 || k > g.channels {
                return Err(FoldError::ClusterCount {
                    group,
                    k,
                    n: g.channels,
                });
            }
        }
        Ok(ks)
    }

    /// Variant used to cluster a group: BatchNorm variants need BatchNorm on every producer.
    pub fn variant_for(&self, group: &FoldableGroup) -> FoldVariant {
        if group.has_batch_norm() {
            self.repair.batch_norm_variant()
        } else {
            FoldVariant::Plain
        }
    }
}

/// Cluster count for `n` channels at sparsity `s`: `max(1, round((1 − s)·n))`.
pub fn sparsity_to_k(n: usize, s: f64) -> Result<usize, FoldError> {
    if !(0.0..1.0).contains(&s) {
        return Err(FoldError::Sparsity(s));
    }
    Ok((((1.0 - s) * n as f64).round() as usize).max(1))
}

/// Fold-AR correction recorded for one producer of a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArRecord {
    pub producer: BlockRef,
    /// Estimated mean intra-cluster correlation `E[c]`, per cluster.
    pub correlation: Vec<f64>,
    /// Scale applied to each folded gamma entry.
    pub scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub producers: Vec<BlockRef>,
    pub consumers: Vec<BlockRef>,
    pub variant: FoldVariant,
    pub n: usize,
    pub k: usize,
    /// `‖W_tot − C W_tot‖²_F` of the fold matrix.
    pub cost: f64,
    pub cluster_sizes: Vec<usize>,
    pub labels: Vec<usize>,
    pub columns: Vec<ColumnBlock>,
    /// Block outputs carrying this group's channels (for variance-ratio probing).
    pub sites: Vec<BlockRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ar: Vec<ArRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub repair: RepairMode,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
}

impl FoldReport {
    pub fn total_cost(&self) -> f64 {
        self.groups.iter().map(|g| g.cost).sum()
    }

    /// For every recorded site, the original channels merged into each compressed channel.
    pub fn channel_map(&self) -> Vec<(BlockRef, Vec<Vec<usize>>)> {
        let mut out = Vec::new();
        for g in &self.groups {
            let mut members = vec![Vec::new(); g.k];
            for (i, &l) in g.labels.iter().enumerate() {
                members[l].push(i);
            }
            for s in &g.sites {
                out.push((*s, members.clone()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_mapping() {
        assert_eq!(sparsity_to_k(64, 0.5).unwrap(), 32);
        assert_eq!(sparsity_to_k(64, 0.0).unwrap(), 64);
        assert_eq!(sparsity_to_k(3, 0.9).unwrap(), 1);
        assert!(matches!(sparsity_to_k(3, 1.0), Err(FoldError::Sparsity(_))));
        assert!(matches!(sparsity_to_k(3, -0.1), Err(FoldError::Sparsity(_))));
    }
}
