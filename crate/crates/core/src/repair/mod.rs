//! Post-fold statistics repair.
//!
//! Folding averages channels, which shrinks activation variance downstream. The
//! repairs here restore it analytically (Fold-AR), from synthesized inputs
//! (Fold-DIR), or from calibration data (Fold-R).

mod ar;
mod data;
mod inversion;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::folding::{fold_network, FoldError, FoldPlan, FoldReport, RepairMode};
use crate::nn::{bn_recalibrate, Network, NnError};
use crate::tensor::Tensor;

pub use ar::{apply_fold_ar, ar_scale, estimate_cluster_correlation, ClusterCorrelation};
pub use data::data_repair;
pub use inversion::{deep_inversion, DIConfig, Inversion};

#[derive(Debug, Error)]
pub enum RepairError {
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("cluster {cluster}: row {row} has zero norm, so its correlation is undefined")]
    ZeroRow { cluster: usize, row: usize },
    #[error("data repair needs at least one calibration batch")]
    EmptyCalibration,
    #[error("network has no BatchNorm layers")]
    NoBatchNorm,
    #[error("invalid deep-inversion config: {0}")]
    Config(String),
}

/// Folds without any statistics correction.
pub fn fold_naive(network: &Network, plan: &FoldPlan) -> Result<(Network, FoldReport), RepairError> {
    Ok(fold_network(network, plan)?)
}

/// Fold-DIR: synthesize one batch from the original network, fold with the BN-DIR
/// matrix variant, and recalibrate BatchNorm on that batch alone.
pub fn fold_dir(
    network: &Network,
    plan: &FoldPlan,
    config: &DIConfig,
) -> Result<(Network, FoldReport, Inversion), RepairError> {
    let synthetic = deep_inversion(network, config)?;
    let plan = FoldPlan {
        repair: RepairMode::Dir,
        ..plan.clone()
    };
    let (folded, report) = fold_network(network, &plan)?;
    let repaired = bn_recalibrate(&folded, std::slice::from_ref(&synthetic.batch))?;
    Ok((repaired, report, synthetic))
}

/// Inputs a repair may draw on besides the network itself.
#[derive(Clone, Debug, Default)]
pub struct RepairInputs<'a> {
    pub calibration: &'a [Tensor],
    pub inversion: DIConfig,
}

/// Result of [`fold_and_repair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairSummary {
    pub mode: RepairMode,
    /// Deep-inversion loss at every step (Fold-DIR only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inversion_loss: Vec<f64>,
}

/// Folds `network` under `plan` and applies the repair it names.
pub fn fold_and_repair(
    network: &Network,
    plan: &FoldPlan,
    inputs: &RepairInputs,
) -> Result<(Network, FoldReport, RepairSummary), RepairError> {
    let mut summary = RepairSummary {
        mode: plan.repair,
        inversion_loss: Vec::new(),
    };
    let (net, report) = match plan.repair {
        RepairMode::Naive => fold_naive(network, plan)?,
        RepairMode::Ar => apply_fold_ar(network, plan)?,
        RepairMode::Data => {
            let (folded, report) = fold_network(network, plan)?;
            (data_repair(network, &folded, &report, inputs.calibration)?, report)
        }
        RepairMode::Dir => {
            let (net, report, inv) = fold_dir(network, plan, &inputs.inversion)?;
            summary.inversion_loss = inv.loss;
            (net, report)
        }
    };
    Ok((net, report, summary))
}
