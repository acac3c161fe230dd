use serde::{Deserialize, Serialize};

use super::{build_fold_matrix, discover_groups, fold_group, FoldError, FoldVariant};
use crate::clustering::{fold_cost, hungarian, kmeans, Assignment, KMeansOptions};
use crate::nn::{BatchNorm, BlockRef, Conv2d, Dense, Layer, Network, Residual};
use crate::tensor::{sq_dist, Matrix, Tensor};

/// How the stacked channels of two networks may be clustered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    /// Unconstrained k-means with `k = n` over all `2n` channels.
    Free,
    /// Each cluster holds exactly one channel from each network (weight matching).
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeLayer {
    pub producers: Vec<BlockRef>,
    pub n: usize,
    /// Fold cost of the producer-side matrix under the chosen clustering.
    pub cost: f64,
    /// Paired mode: `pairing[i]` is the channel of the second network merged with channel `i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<Vec<usize>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub mode: MergeMode,
    pub layers: Vec<MergeLayer>,
}

fn mismatch(at: BlockRef, what: &str) -> FoldError {
    FoldError::Architecture(format!("block {at}: {what}"))
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_parts(shape, data)
}

/// Block-diagonal join of two `[out, in, rest..]` weights into `[2out, 2in, rest..]`.
fn block_diag(a: &Tensor, b: &Tensor) -> Tensor {
    let (out, inp) = (a.shape()[0], a.shape()[1]);
    let rest: usize = a.shape()[2..].iter().product();
    let mut shape = a.shape().to_vec();
    shape[0] *= 2;
    shape[1] *= 2;
    let mut data = vec![0.0; 4 * out * inp * rest];
    for (src, row_off, col_off) in [(a, 0, 0), (b, out, inp)] {
        for o in 0..out {
            for i in 0..inp {
                let s = (o * inp + i) * rest;
                let d = ((row_off + o) * 2 * inp + col_off + i) * rest;
                data[d..d + rest].copy_from_slice(&src.data()[s..s + rest]);
            }
        }
    }
    Tensor::from_parts(shape, data)
}

/// `½ [A | B]` along the input axis.
fn half_hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let (out, inp) = (a.shape()[0], a.shape()[1]);
    let rest: usize = a.shape()[2..].iter().product();
    let mut shape = a.shape().to_vec();
    shape[1] *= 2;
    let mut data = Vec::with_capacity(2 * a.len());
    for o in 0..out {
        let span = inp * rest;
        data.extend(a.data()[o * span..(o + 1) * span].iter().map(|v| 0.5 * v));
        data.extend(b.data()[o * span..(o + 1) * span].iter().map(|v| 0.5 * v));
    }
    Tensor::from_parts(shape, data)
}

fn half_sum(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * x + 0.5 * y).collect(),
    )
}

#[derive(Clone, Copy, PartialEq)]
enum Width {
    Single,
    Doubled,
}

struct Joiner {
    final_producer: BlockRef,
}

impl Joiner {
    fn join_weights(
        &self,
        at: BlockRef,
        wa: &Tensor,
        wb: &Tensor,
        ba: &Tensor,
        bb: &Tensor,
        width: Width,
    ) -> (Tensor, Tensor) {
        if at == self.final_producer {
            (half_hcat(wa, wb), half_sum(ba, bb))
        } else if width == Width::Single {
            (stack_rows(wa, wb), stack_rows(ba, bb))
        } else {
            (block_diag(wa, wb), stack_rows(ba, bb))
        }
    }

    fn join_seq(
        &self,
        a: &[Layer],
        b: &[Layer],
        at: &dyn Fn(usize) -> BlockRef,
        mut width: Width,
    ) -> Result<(Vec<Layer>, Width), FoldError> {
        if a.len() != b.len() {
            return Err(mismatch(at(0), "different block counts"));
        }
        let mut out = Vec::with_capacity(a.len());
        for (i, (la, lb)) in a.iter().zip(b).enumerate() {
            let r = at(i);
            let joined = match (la, lb) {
                (Layer::Dense(da), Layer::Dense(db)) => {
                    if da.weight.shape() != db.weight.shape() {
                        return Err(mismatch(r, "dense shapes differ"));
                    }
                    if r == self.final_producer && width == Width::Single {
                        return Err(mismatch(r, "the classifier reads the raw input; nothing to merge"));
                    }
                    let (weight, bias) = self.join_weights(r, &da.weight, &db.weight, &da.bias, &db.bias, width);
                    width = Width::Doubled;
                    Layer::Dense(Dense { weight, bias })
                }
                (Layer::Conv2d(ca), Layer::Conv2d(cb)) => {
                    if ca.weight.shape() != cb.weight.shape() || ca.stride != cb.stride || ca.padding != cb.padding {
                        return Err(mismatch(r, "conv2d hyperparameters differ"));
                    }
                    if r == self.final_producer && width == Width::Single {
                        return Err(mismatch(r, "the classifier reads the raw input; nothing to merge"));
                    }
                    let (weight, bias) = self.join_weights(r, &ca.weight, &cb.weight, &ca.bias, &cb.bias, width);
                    width = Width::Doubled;
                    Layer::Conv2d(Conv2d {
                        weight,
                        bias,
                        stride: ca.stride,
                        padding: ca.padding,
                    })
                }
                (Layer::BatchNorm(x), Layer::BatchNorm(y)) => {
                    if x.channels() != y.channels() {
                        return Err(mismatch(r, "batchnorm widths differ"));
                    }
                    if width == Width::Single {
                        return Err(mismatch(r, "batchnorm on the raw input cannot be merged"));
                    }
                    Layer::BatchNorm(BatchNorm {
                        gamma: stack_rows(&x.gamma, &y.gamma),
                        beta: stack_rows(&x.beta, &y.beta),
                        running_mean: stack_rows(&x.running_mean, &y.running_mean),
                        running_var: stack_rows(&x.running_var, &y.running_var),
                        eps: x.eps,
                    })
                }
                (Layer::Relu, Layer::Relu) => Layer::Relu,
                (Layer::Flatten, Layer::Flatten) => Layer::Flatten,
                (Layer::AvgPool(p), Layer::AvgPool(q)) if p == q => Layer::AvgPool(p.clone()),
                (Layer::Residual(x), Layer::Residual(y)) => {
                    let top = r.top;
                    let (main, wm) = self.join_seq(&x.main, &y.main, &|j| BlockRef::main(top, j), width)?;
                    let (shortcut, ws) =
                        self.join_seq(&x.shortcut, &y.shortcut, &|j| BlockRef::shortcut(top, j), width)?;
                    if wm != ws {
                        return Err(mismatch(r, "identity shortcut carries the raw input"));
                    }
                    width = wm;
                    Layer::Residual(Residual { main, shortcut })
                }
                _ => return Err(mismatch(r, "block kinds differ")),
            };
            out.push(joined);
        }
        Ok((out, width))
    }
}

/// Stacks two networks of identical architecture side by side: the first layer's
/// outputs are concatenated, hidden layers become block-diagonal, and the classifier
/// averages the two halves (`½[W_A | W_B]`, bias `½(b_A + b_B)`).
pub fn joint_network(a: &Network, b: &Network) -> Result<Network, FoldError> {
    if a.input_shape != b.input_shape || a.class_count != b.class_count {
        return Err(FoldError::Architecture("input shape or class count differ".into()));
    }
    let final_producer = a
        .block_refs()
        .into_iter()
        .rev()
        .find(|r| matches!(a.block(*r), Some(Layer::Dense(_) | Layer::Conv2d(_))))
        .ok_or_else(|| FoldError::Architecture("network has no producer layers".into()))?;
    if final_producer.inner.is_some() {
        return Err(FoldError::Architecture(
            "the classifier must be a top-level layer".into(),
        ));
    }
    let joiner = Joiner { final_producer };
    let (blocks, _) = joiner.join_seq(&a.blocks, &b.blocks, &BlockRef::top, Width::Single)?;
    Ok(Network::new(blocks, a.input_shape.clone(), a.class_count)?)
}

/// Merges two networks by folding their joint network back to the original width.
///
/// Clustering uses producer-side columns only. Producers become cluster means, which
/// for paired clusters is the `½(W_A + P W_B)` average of weight matching.
pub fn merge_networks(
    a: &Network,
    b: &Network,
    mode: MergeMode,
    seed: u64,
) -> Result<(Network, MergeReport), FoldError> {
    let mut net = joint_network(a, b)?;
    let groups = discover_groups(&net)?.groups;
    let mut layers = Vec::with_capacity(groups.len());
    for (index, group) in groups.iter().enumerate() {
        let n = group.channels / 2;
        let variant = if group.has_batch_norm() {
            FoldVariant::BnAr
        } else {
            FoldVariant::Plain
        };
        let fm = build_fold_matrix(&net, group, variant, false)?;
        let x = &fm.matrix;
        let (assignment, pairing) = match mode {
            MergeMode::Free => (
                kmeans(x, n, seed.wrapping_add(index as u64), &KMeansOptions::default())?.assignment,
                None,
            ),
            MergeMode::Paired => {
                let pairing = weight_matching(x)?;
                let mut labels = vec![0; 2 * n];
                for (i, &j) in pairing.iter().enumerate() {
                    labels[i] = i;
                    labels[n + j] = i;
                }
                (Assignment::new(labels, n)?, Some(pairing))
            }
        };
        layers.push(MergeLayer {
            producers: group.producers.iter().map(|p| p.at).collect(),
            n,
            cost: fold_cost(&assignment, x)?,
            pairing,
            labels: assignment.labels().to_vec(),
        });
        fold_group(&mut net, group, &assignment)?;
    }
    net.validate()?;
    Ok((net, MergeReport { mode, layers }))
}

/// Hungarian matching of the first half of the rows onto the second half by squared distance.
pub fn weight_matching(stacked: &Matrix) -> Result<Vec<usize>, FoldError> {
    let n = stacked.rows() / 2;
    let mut cost = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            cost[(i, j)] = sq_dist(stacked.row(i), stacked.row(n + j));
        }
    }
    Ok(hungarian(&cost)?.as_slice().to_vec())
}
