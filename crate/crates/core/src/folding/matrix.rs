use serde::{Deserialize, Serialize};

use super::{FoldError, FoldableGroup};
use crate::nn::{BatchNorm, BlockRef, Conv2d, Dense, Layer, Network, NnError};
use crate::tensor::{Matrix, Tensor};

/// Column layout of the matrix clustered for a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldVariant {
    /// `[W | b | consumers]`.
    Plain,
    /// `[Σ_n W | Σ_n (b − μ) | γ | β | consumers]`, the normalized-weight layout used by Fold-AR.
    BnAr,
    /// `[consumers | W | b | γ | Σ_n | β]`.
    BnDir,
}

/// A named run of columns in a fold matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnBlock {
    pub label: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldMatrix {
    pub matrix: Matrix,
    pub columns: Vec<ColumnBlock>,
}

impl FoldMatrix {
    /// Columns of the named blocks, concatenated in the given order.
    pub fn select(&self, labels: &[&str]) -> Matrix {
        let blocks: Vec<&ColumnBlock> = labels
            .iter()
            .map(|l| self.columns.iter().find(|c| c.label == *l).expect("known column block"))
            .collect();
        let width = blocks.iter().map(|b| b.len).sum();
        let mut out = Matrix::zeros(self.matrix.rows(), width);
        for i in 0..self.matrix.rows() {
            let row = self.matrix.row(i);
            let mut at = 0;
            for b in &blocks {
                out.row_mut(i)[at..at + b.len].copy_from_slice(&row[b.start..b.start + b.len]);
                at += b.len;
            }
        }
        out
    }
}

/// Row `i` holds everything producer `layer` computes for output channel `i`:
/// Dense → `[W_i | b_i]`; Conv2d → `[vec(𝒲_i) | b_i]`.
pub fn flatten_producer_rows(layer: &Layer) -> Result<Matrix, FoldError> {
    let (weight, bias) = match layer {
        Layer::Dense(Dense { weight, bias }) | Layer::Conv2d(Conv2d { weight, bias, .. }) => (weight, bias),
        other => {
            return Err(FoldError::Unsupported {
                block: BlockRef::top(0),
                kind: other.kind_name(),
                role: "produce foldable channels",
            })
        }
    };
    let n = weight.shape()[0];
    let d = weight.len() / n;
    let mut m = Matrix::zeros(n, d + 1);
    for i in 0..n {
        let row = m.row_mut(i);
        row[..d].copy_from_slice(&weight.data()[i * d..(i + 1) * d]);
        row[d] = bias.data()[i];
    }
    Ok(m)
}

/// Inverse of [`flatten_producer_rows`]: rebuilds `template` with `rows.rows()` output channels.
pub fn unflatten_producer_rows(template: &Layer, rows: &Matrix) -> Result<Layer, FoldError> {
    let rebuild = |weight: &Tensor| -> Result<(Tensor, Tensor), FoldError> {
        let d = weight.len() / weight.shape()[0];
        if rows.cols() != d + 1 {
            return Err(FoldError::ChannelMismatch {
                block: BlockRef::top(0),
                expected: d + 1,
                actual: rows.cols(),
            });
        }
        let n = rows.rows();
        let mut w = Vec::with_capacity(n * d);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            w.extend_from_slice(&rows.row(i)[..d]);
            b.push(rows.row(i)[d]);
        }
        let mut shape = weight.shape().to_vec();
        shape[0] = n;
        Ok((
            Tensor::new(shape, w).map_err(NnError::from)?,
            Tensor::new(vec![n], b).map_err(NnError::from)?,
        ))
    };
    match template {
        Layer::Dense(dl) => {
            let (weight, bias) = rebuild(&dl.weight)?;
            Ok(Layer::Dense(Dense { weight, bias }))
        }
        Layer::Conv2d(c) => {
            let (weight, bias) = rebuild(&c.weight)?;
            Ok(Layer::Conv2d(Conv2d {
                weight,
                bias,
                stride: c.stride,
                padding: c.padding,
            }))
        }
        other => Err(FoldError::Unsupported {
            block: BlockRef::top(0),
            kind: other.kind_name(),
            role: "produce foldable channels",
        }),
    }
}

/// Row `i` is the vectorized slice of the consumer's weight that reads input channel `i`
/// (Dense: columns `i·s..(i+1)·s`; Conv2d: `𝒲[:, i, :, :]`).
pub fn flatten_consumer_cols(layer: &Layer, channels: usize, spatial: usize) -> Result<Matrix, FoldError> {
    let (weight, outer, inner) = match layer {
        Layer::Dense(d) => (&d.weight, d.out_features(), spatial),
        Layer::Conv2d(c) if spatial == 1 => {
            let (kh, kw) = c.kernel();
            (&c.weight, c.out_channels(), kh * kw)
        }
        other => {
            return Err(FoldError::Unsupported {
                block: BlockRef::top(0),
                kind: other.kind_name(),
                role: "consume foldable channels",
            })
        }
    };
    let width = weight.len() / outer;
    if width != channels * inner {
        return Err(FoldError::ChannelMismatch {
            block: BlockRef::top(0),
            expected: channels * inner,
            actual: width,
        });
    }
    let w = weight.data();
    let mut m = Matrix::zeros(channels, outer * inner);
    for i in 0..channels {
        let row = m.row_mut(i);
        for o in 0..outer {
            let src = o * width + i * inner;
            row[o * inner..(o + 1) * inner].copy_from_slice(&w[src..src + inner]);
        }
    }
    Ok(m)
}

struct Builder {
    rows: usize,
    parts: Vec<Matrix>,
    columns: Vec<ColumnBlock>,
    width: usize,
}

impl Builder {
    fn push(&mut self, label: String, m: Matrix) {
        debug_assert_eq!(m.rows(), self.rows);
        self.columns.push(ColumnBlock {
            label,
            start: self.width,
            len: m.cols(),
        });
        self.width += m.cols();
        self.parts.push(m);
    }

    fn push_column(&mut self, label: String, v: &[f64]) {
        self.push(label, Matrix::new(v.len(), 1, v.to_vec()));
    }

    fn finish(self) -> FoldMatrix {
        let mut matrix = Matrix::zeros(self.rows, 0);
        for p in &self.parts {
            matrix = matrix.hcat(p);
        }
        FoldMatrix {
            matrix,
            columns: self.columns,
        }
    }
}

fn layer_at(network: &Network, at: BlockRef) -> Result<&Layer, FoldError> {
    network
        .block(at)
        .ok_or_else(|| FoldError::Topology(format!("no block at {at}")))
}

pub(crate) fn batch_norm_at(network: &Network, at: BlockRef) -> Result<&BatchNorm, FoldError> {
    match layer_at(network, at)? {
        Layer::BatchNorm(bn) => Ok(bn),
        other => Err(FoldError::Unsupported {
            block: at,
            kind: other.kind_name(),
            role: "act as the group's BatchNorm",
        }),
    }
}

fn with_block<T>(at: BlockRef, r: Result<T, FoldError>) -> Result<T, FoldError> {
    r.map_err(|e| match e {
        FoldError::Unsupported { kind, role, .. } => FoldError::Unsupported { block: at, kind, role },
        FoldError::ChannelMismatch { expected, actual, .. } => FoldError::ChannelMismatch {
            block: at,
            expected,
            actual,
        },
        other => other,
    })
}

/// Producer rows `[W | b]` of one producer, checked against the group width.
pub(crate) fn producer_rows(network: &Network, at: BlockRef, channels: usize) -> Result<Matrix, FoldError> {
    let m = with_block(at, flatten_producer_rows(layer_at(network, at)?))?;
    if m.rows() != channels {
        return Err(FoldError::ChannelMismatch {
            block: at,
            expected: channels,
            actual: m.rows(),
        });
    }
    Ok(m)
}

/// Normalized producer weights `Σ_n W` (bias excluded), the rows Fold-AR correlates.
pub(crate) fn normalized_weight_rows(
    network: &Network,
    at: BlockRef,
    bn: BlockRef,
    channels: usize,
) -> Result<Matrix, FoldError> {
    let rows = producer_rows(network, at, channels)?;
    let inv = batch_norm_at(network, bn)?.inv_std();
    let d = rows.cols() - 1;
    let mut m = Matrix::zeros(channels, d);
    for i in 0..channels {
        for j in 0..d {
            m[(i, j)] = rows[(i, j)] * inv[i];
        }
    }
    Ok(m)
}

/// Concatenates every coupled parameter of a group into one `n×D` matrix.
///
/// With `consumers = false` only producer-side columns are included (used when merging).
pub fn build_fold_matrix(
    network: &Network,
    group: &FoldableGroup,
    variant: FoldVariant,
    consumers: bool,
) -> Result<FoldMatrix, FoldError> {
    let n = group.channels;
    if variant != FoldVariant::Plain && !group.has_batch_norm() {
        return Err(FoldError::NoBatchNorm(0));
    }
    let mut b = Builder {
        rows: n,
        parts: Vec::new(),
        columns: Vec::new(),
        width: 0,
    };
    let push_consumers = |b: &mut Builder| -> Result<(), FoldError> {
        for c in &group.consumers {
            let m = with_block(c.at, flatten_consumer_cols(layer_at(network, c.at)?, n, c.spatial))?;
            b.push(format!("{}:consumer", c.at), m);
        }
        Ok(())
    };
    if consumers && variant == FoldVariant::BnDir {
        push_consumers(&mut b)?;
    }
    for p in &group.producers {
        let rows = producer_rows(network, p.at, n)?;
        let d = rows.cols() - 1;
        let weights = Matrix::new(n, d, (0..n).flat_map(|i| rows.row(i)[..d].to_vec()).collect());
        let bias = rows.column(d);
        match (variant, p.batch_norm) {
            (FoldVariant::BnAr, Some(bn_at)) => {
                let bn = batch_norm_at(network, bn_at)?;
                let inv = bn.inv_std();
                let mut nw = weights.clone();
                for i in 0..n {
                    for v in nw.row_mut(i) {
                        *v *= inv[i];
                    }
                }
                let shift: Vec<f64> = (0..n).map(|i| inv[i] * (bias[i] - bn.running_mean.data()[i])).collect();
                b.push(format!("{}:normalized-weight", p.at), nw);
                b.push_column(format!("{}:normalized-bias", p.at), &shift);
                b.push_column(format!("{bn_at}:gamma"), bn.gamma.data());
                b.push_column(format!("{bn_at}:beta"), bn.beta.data());
            }
            (FoldVariant::BnDir, Some(bn_at)) => {
                let bn = batch_norm_at(network, bn_at)?;
                b.push(format!("{}:weight", p.at), weights);
                b.push_column(format!("{}:bias", p.at), &bias);
                b.push_column(format!("{bn_at}:gamma"), bn.gamma.data());
                b.push_column(format!("{bn_at}:inv-std"), &bn.inv_std());
                b.push_column(format!("{bn_at}:beta"), bn.beta.data());
            }
            _ => {
                b.push(format!("{}:weight", p.at), weights);
                b.push_column(format!("{}:bias", p.at), &bias);
            }
        }
    }
    for &at in &group.batch_norms {
        let bn = batch_norm_at(network, at)?;
        if bn.channels() != n {
            return Err(FoldError::ChannelMismatch {
                block: at,
                expected: n,
                actual: bn.channels(),
            });
        }
        let inv = bn.inv_std();
        let scale: Vec<f64> = (0..n).map(|i| bn.gamma.data()[i] * inv[i]).collect();
        let shift: Vec<f64> = (0..n)
            .map(|i| bn.beta.data()[i] - scale[i] * bn.running_mean.data()[i])
            .collect();
        b.push_column(format!("{at}:affine-scale"), &scale);
        b.push_column(format!("{at}:affine-shift"), &shift);
    }
    if consumers && variant != FoldVariant::BnDir {
        push_consumers(&mut b)?;
    }
    Ok(b.finish())
}
