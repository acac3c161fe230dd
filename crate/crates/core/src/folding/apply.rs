use super::{
    build_fold_matrix, discover_groups, FoldError, FoldPlan, FoldReport, FoldableGroup, GroupKind, GroupReport,
};
use crate::clustering::{kmeans, Assignment};
use crate::nn::{BlockRef, Layer, Network};
use crate::tensor::Tensor;

/// Reduces the channel axis of a `[outer, n, inner]` array to `[outer, k, inner]`
/// by cluster sums, or cluster means when `mean` is set.
fn reduce(data: &[f64], outer: usize, inner: usize, a: &Assignment, mean: bool) -> Vec<f64> {
    let (n, k) = (a.n(), a.k());
    let labels = a.labels();
    let mut out = vec![0.0; outer * k * inner];
    for o in 0..outer {
        for (i, &c) in labels.iter().enumerate() {
            let src = &data[(o * n + i) * inner..(o * n + i + 1) * inner];
            let dst = &mut out[(o * k + c) * inner..(o * k + c + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    if mean {
        let sizes = a.sizes();
        for o in 0..outer {
            for (c, &s) in sizes.iter().enumerate() {
                for d in &mut out[(o * k + c) * inner..(o * k + c + 1) * inner] {
                    *d /= s as f64;
                }
            }
        }
    }
    out
}

fn reduce_tensor(t: &Tensor, axis: usize, a: &Assignment, mean: bool) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut new_shape = shape.to_vec();
    new_shape[axis] = a.k();
    Tensor::from_parts(new_shape, reduce(t.data(), outer, inner, a, mean))
}

fn block_mut(network: &mut Network, at: BlockRef) -> Result<&mut Layer, FoldError> {
    network
        .block_mut(at)
        .ok_or_else(|| FoldError::Topology(format!("no block at {at}")))
}

fn fold_batch_norm(layer: &mut Layer, at: BlockRef, a: &Assignment) -> Result<(), FoldError> {
    let Layer::BatchNorm(bn) = layer else {
        return Err(FoldError::Unsupported {
            block: at,
            kind: layer.kind_name(),
            role: "act as the group's BatchNorm",
        });
    };
    for t in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
        *t = reduce_tensor(t, 0, a, true);
    }
    Ok(())
}

/// Rewrites one group with `k` channels: producer rows, biases and BatchNorm entries
/// become cluster means; consumer input slices become cluster sums.
pub fn fold_group(network: &mut Network, group: &FoldableGroup, assignment: &Assignment) -> Result<(), FoldError> {
    if assignment.n() != group.channels {
        return Err(FoldError::AssignmentSize {
            expected: group.channels,
            actual: assignment.n(),
        });
    }
    let a = assignment;
    for p in &group.producers {
        match block_mut(network, p.at)? {
            Layer::Dense(d) => {
                d.weight = reduce_tensor(&d.weight, 0, a, true);
                d.bias = reduce_tensor(&d.bias, 0, a, true);
            }
            Layer::Conv2d(c) => {
                c.weight = reduce_tensor(&c.weight, 0, a, true);
                c.bias = reduce_tensor(&c.bias, 0, a, true);
            }
            other => {
                return Err(FoldError::Unsupported {
                    block: p.at,
                    kind: other.kind_name(),
                    role: "produce foldable channels",
                })
            }
        }
        if let Some(bn) = p.batch_norm {
            fold_batch_norm(block_mut(network, bn)?, bn, a)?;
        }
    }
    for &bn in &group.batch_norms {
        fold_batch_norm(block_mut(network, bn)?, bn, a)?;
    }
    for c in &group.consumers {
        match block_mut(network, c.at)? {
            Layer::Dense(d) => {
                let (out, width) = (d.out_features(), d.in_features());
                if width != group.channels * c.spatial {
                    return Err(FoldError::ChannelMismatch {
                        block: c.at,
                        expected: group.channels * c.spatial,
                        actual: width,
                    });
                }
                let data = reduce(d.weight.data(), out, c.spatial, a, false);
                d.weight = Tensor::from_parts(vec![out, a.k() * c.spatial], data);
            }
            Layer::Conv2d(conv) => {
                if conv.in_channels() != group.channels {
                    return Err(FoldError::ChannelMismatch {
                        block: c.at,
                        expected: group.channels,
                        actual: conv.in_channels(),
                    });
                }
                conv.weight = reduce_tensor(&conv.weight, 1, a, false);
            }
            other => {
                return Err(FoldError::Unsupported {
                    block: c.at,
                    kind: other.kind_name(),
                    role: "consume foldable channels",
                })
            }
        }
    }
    Ok(())
}

/// Context handed to the per-group hook of [`fold_network_with`].
pub struct FoldStep<'a> {
    pub index: usize,
    pub group: &'a FoldableGroup,
    pub assignment: &'a Assignment,
    /// The network just before this group was folded (upstream groups already folded).
    pub before: &'a Network,
}

/// Folds every group front to back, calling `hook` after each group is rewritten.
///
/// Each group is clustered on its fold matrix built from the current (upstream-folded)
/// weights, using the variant implied by `plan.repair`.
pub fn fold_network_with<F>(network: &Network, plan: &FoldPlan, mut hook: F) -> Result<(Network, FoldReport), FoldError>
where
    F: FnMut(&FoldStep, &mut Network, &mut GroupReport) -> Result<(), FoldError>,
{
    let groups = discover_groups(network)?.groups;
    let ks = plan.cluster_counts(&groups)?;
    let mut net = network.clone();
    let mut reports = Vec::with_capacity(groups.len());
    for (index, (group, &k)) in groups.iter().zip(&ks).enumerate() {
        let variant = plan.variant_for(group);
        let fm = build_fold_matrix(&net, group, variant, true).map_err(|e| match e {
            FoldError::NoBatchNorm(_) => FoldError::NoBatchNorm(index),
            e => e,
        })?;
        let km = kmeans(&fm.matrix, k, plan.seed.wrapping_add(index as u64), &plan.kmeans)?;
        let mut report = GroupReport {
            producers: group.producers.iter().map(|p| p.at).collect(),
            consumers: group.consumers.iter().map(|c| c.at).collect(),
            variant,
            n: group.channels,
            k,
            cost: km.cost,
            cluster_sizes: km.assignment.sizes(),
            labels: km.assignment.labels().to_vec(),
            columns: fm.columns,
            sites: group.sites.clone(),
            ar: Vec::new(),
        };
        let before = net.clone();
        fold_group(&mut net, group, &km.assignment)?;
        let step = FoldStep {
            index,
            group,
            assignment: &km.assignment,
            before: &before,
        };
        hook(&step, &mut net, &mut report)?;
        reports.push(report);
    }
    net.validate()?;
    Ok((
        net,
        FoldReport {
            repair: plan.repair,
            seed: plan.seed,
            groups: reports,
        },
    ))
}

/// Folds every group without any statistics repair.
pub fn fold_network(network: &Network, plan: &FoldPlan) -> Result<(Network, FoldReport), FoldError> {
    fold_network_with(network, plan, |_, _, _| Ok(()))
}

/// Folds the channel group formed at the addition of the residual block at top-level
/// index `top`: the main path's last producer, the shortcut producer (or, for an
/// identity shortcut, the group entering the block), and every consumer, with one
/// shared assignment.
pub fn fold_residual_block(network: &Network, top: usize, assignment: &Assignment) -> Result<Network, FoldError> {
    let Some(Layer::Residual(_)) = network.blocks.get(top) else {
        return Err(FoldError::Topology(format!("block {top} is not a residual block")));
    };
    let groups = discover_groups(network)?.groups;
    let group = groups
        .iter()
        .find(|g| g.kind() == GroupKind::ResidualShared && g.sites.contains(&BlockRef::top(top)))
        .ok_or_else(|| FoldError::Topology(format!("residual block {top} has no foldable output group")))?;
    let mut net = network.clone();
    fold_group(&mut net, group, assignment)?;
    net.validate()?;
    Ok(net)
}
