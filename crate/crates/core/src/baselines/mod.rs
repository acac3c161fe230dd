//! Structured magnitude pruning, the comparison baseline for folding.

use serde::{Deserialize, Serialize};

use crate::folding::matrix::producer_rows;
use crate::folding::{discover_groups, sparsity_to_k, FoldError, FoldableGroup};
use crate::nn::{BlockRef, Layer, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Fraction of channels removed from every group.
    pub sparsity: f64,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub producers: Vec<BlockRef>,
    pub n: usize,
    /// Surviving channel indices, ascending.
    pub kept: Vec<usize>,
    /// Channel scores (summed over coupled producers).
    pub scores: Vec<f64>,
    /// Squared Frobenius norm of the removed producer rows `[W | b]`.
    pub removed_energy: f64,
    pub sites: Vec<BlockRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub spec: PruneSpec,
    pub groups: Vec<PruneGroup>,
}

impl PruneReport {
    pub fn total_removed_energy(&self) -> f64 {
        self.groups.iter().map(|g| g.removed_energy).sum()
    }

    /// For every recorded site, the single original channel behind each kept channel.
    pub fn channel_map(&self) -> Vec<(BlockRef, Vec<Vec<usize>>)> {
        self.groups
            .iter()
            .flat_map(|g| g.sites.iter().map(|s| (*s, g.kept.iter().map(|&i| vec![i]).collect())))
            .collect()
    }
}

/// Keeps the `sparsity_to_k(n, s)` channels of every foldable group with the largest
/// producer-row norm (bias included), dropping the rest from producers, BatchNorms and
/// consumers. Coupled residual producers are scored by their summed norms; ties keep the
/// lower index.
pub fn magnitude_prune(network: &Network, spec: &PruneSpec) -> Result<(Network, PruneReport), FoldError> {
    let groups = discover_groups(network)?.groups;
    let mut net = network.clone();
    let mut report = PruneReport {
        spec: *spec,
        groups: Vec::with_capacity(groups.len()),
    };
    for group in &groups {
        let n = group.channels;
        let k = sparsity_to_k(n, spec.sparsity)?;
        let mut scores = vec![0.0; n];
        let mut energy = vec![0.0; n];
        for p in &group.producers {
            let rows = producer_rows(network, p.at, n)?;
            for (i, (score, e)) in scores.iter_mut().zip(&mut energy).enumerate() {
                let row = rows.row(i);
                *score += match spec.norm {
                    Norm::L1 => row.iter().map(|v| v.abs()).sum(),
                    Norm::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
                };
                *e += row.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut kept = order[..k].to_vec();
        kept.sort_unstable();
        let removed_energy = order[k..].iter().map(|&i| energy[i]).sum();
        select_group(&mut net, group, &kept)?;
        report.groups.push(PruneGroup {
            producers: group.producers.iter().map(|p| p.at).collect(),
            n,
            kept,
            scores,
            removed_energy,
            sites: group.sites.clone(),
        });
    }
    net.validate()?;
    Ok((net, report))
}

/// Picks entries `keep` along `axis`, where each entry spans the trailing `inner` values.
fn gather(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &i in keep {
            let start = (o * n + i) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::new(new_shape, data).expect("gathered length matches shape")
}

fn layer_mut(network: &mut Network, at: BlockRef) -> Result<&mut Layer, FoldError> {
    network
        .block_mut(at)
        .ok_or_else(|| FoldError::Topology(format!("no block at {at}")))
}

fn select_batch_norm(layer: &mut Layer, keep: &[usize]) {
    if let Layer::BatchNorm(bn) = layer {
        for t in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
            *t = gather(t, 0, keep);
        }
    }
}

/// Restricts one group to the channels in `keep`.
fn select_group(network: &mut Network, group: &FoldableGroup, keep: &[usize]) -> Result<(), FoldError> {
    for p in &group.producers {
        match layer_mut(network, p.at)? {
            Layer::Dense(d) => {
                d.weight = gather(&d.weight, 0, keep);
                d.bias = gather(&d.bias, 0, keep);
            }
            Layer::Conv2d(c) => {
                c.weight = gather(&c.weight, 0, keep);
                c.bias = gather(&c.bias, 0, keep);
            }
            _ => unreachable!("group producers are dense or conv"),
        }
        if let Some(bn) = p.batch_norm {
            select_batch_norm(layer_mut(network, bn)?, keep);
        }
    }
    for &bn in &group.batch_norms {
        select_batch_norm(layer_mut(network, bn)?, keep);
    }
    for c in &group.consumers {
        match layer_mut(network, c.at)? {
            Layer::Dense(d) => {
                let out = d.out_features();
                let w = d.weight.clone().reshape(vec![out, group.channels, c.spatial]);
                d.weight = gather(&w, 1, keep).reshape(vec![out, keep.len() * c.spatial]);
            }
            Layer::Conv2d(conv) => conv.weight = gather(&conv.weight, 1, keep),
            _ => unreachable!("group consumers are dense or conv"),
        }
    }
    Ok(())
}
