use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::nn::{activation_sites, forward, forward_trace, BlockRef, Network, NnError, SiteKind};
use crate::tensor::Tensor;

/// Original variances at or below this are treated as zero (dead channels).
pub const ZERO_VARIANCE: f64 = 1e-12;

const EVAL_CHUNK: usize = 1024;

/// Arg-max class per row (ties resolve to the lowest index).
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Top-1 accuracy over the dataset.
pub fn evaluate(network: &Network, data: &Dataset) -> Result<f64, NnError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (i, batch) in data.batches(EVAL_CHUNK).iter().enumerate() {
        let pred = predictions(&forward(network, batch)?);
        let labels = &data.labels[i * EVAL_CHUNK..];
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Variance ratio at one traced site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRatio {
    pub site: BlockRef,
    /// Mean over compressed channels of `Var(x̃_k) / mean_{i ∈ cluster k} Var(x_i)`;
    /// NaN when every channel was excluded.
    pub ratio: f64,
    /// Channels skipped because their original variance is zero.
    pub excluded: usize,
    pub channels: usize,
}

/// Per-site variance ratios between an original and a compressed network.
///
/// `channel_map` lists, per site, the original channels behind each compressed channel.
/// Sites absent from the map are compared channel for channel.
pub fn variance_ratio(
    original: &Network,
    compressed: &Network,
    probe: &Tensor,
    sites: &[BlockRef],
    channel_map: &[(BlockRef, Vec<Vec<usize>>)],
) -> Result<Vec<SiteRatio>, NnError> {
    let before = forward_trace(original, probe, sites, false)?;
    let after = forward_trace(compressed, probe, sites, false)?;
    Ok(sites
        .iter()
        .zip(before.sites.iter().zip(&after.sites))
        .map(|(&site, (b, a))| {
            let identity: Vec<Vec<usize>>;
            let members = match channel_map.iter().find(|(s, _)| *s == site) {
                Some((_, m)) => m,
                None => {
                    identity = (0..a.var.len()).map(|i| vec![i]).collect();
                    &identity
                }
            };
            let mut total = 0.0;
            let mut used = 0;
            for (k, m) in members.iter().enumerate() {
                let orig = m.iter().map(|&i| b.var[i]).sum::<f64>() / m.len() as f64;
                if orig <= ZERO_VARIANCE {
                    continue;
                }
                total += a.var[k] / orig;
                used += 1;
            }
            SiteRatio {
                site,
                ratio: if used == 0 { f64::NAN } else { total / used as f64 },
                excluded: members.len() - used,
                channels: members.len(),
            }
        })
        .collect())
}

/// Post-activation sites in forward order; the last is the headline "last layer".
pub fn probe_sites(network: &Network) -> Vec<BlockRef> {
    activation_sites(network, SiteKind::PostActivation)
}

/// Headline numbers: last-site ratio and mean `|1 − ratio|` over sites with a finite ratio.
pub fn ratio_summary(ratios: &[SiteRatio]) -> (f64, f64) {
    let last = ratios.last().map_or(f64::NAN, |r| r.ratio);
    let finite: Vec<f64> = ratios.iter().map(|r| r.ratio).filter(|r| r.is_finite()).collect();
    let dev = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().map(|r| (1.0 - r).abs()).sum::<f64>() / finite.len() as f64
    };
    (last, dev)
}
