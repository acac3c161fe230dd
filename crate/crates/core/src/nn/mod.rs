//! Minimal chain-of-blocks network representation.
//!
//! A [`Network`] is an ordered list of [`Layer`]s. Residual blocks hold a main
//! path and a shortcut path (empty shortcut means identity) and sum their
//! outputs; nesting is a single level deep.

mod backward;
mod forward;
pub mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub(crate) use backward::cross_entropy;
pub use backward::{input_gradient, loss_value, LossSpec, ParamGrads, TrainPass};
pub use forward::{
    activation_sites, bn_recalibrate, forward, forward_trace, forward_with_observer, ChannelStats, ForwardTrace,
    SiteKind, VAR_FLOOR,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("block {block}: {detail}")]
    Shape { block: usize, detail: String },
    #[error("input batch shape {actual:?} does not conform to network input shape {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("unknown trace site {0}")]
    UnknownSite(BlockRef),
    #[error("loss includes batch-norm statistic terms but the network has no BatchNorm blocks")]
    NoBatchNorm,
    #[error("target list has {actual} entries for a batch of {expected}")]
    Targets { expected: usize, actual: usize },
    #[error("recalibration needs at least one batch")]
    EmptyBatches,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which path of a residual block an inner block lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Main,
    Shortcut,
}

/// Address of a block: a top-level index, optionally descending one level into a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockRef {
    pub top: usize,
    pub inner: Option<(Branch, usize)>,
}

impl BlockRef {
    pub fn top(top: usize) -> Self {
        Self { top, inner: None }
    }

    pub fn main(top: usize, index: usize) -> Self {
        Self {
            top,
            inner: Some((Branch::Main, index)),
        }
    }

    pub fn shortcut(top: usize, index: usize) -> Self {
        Self {
            top,
            inner: Some((Branch::Shortcut, index)),
        }
    }
}

impl std::fmt::Display for BlockRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.inner {
            None => write!(f, "{}", self.top),
            Some((Branch::Main, i)) => write!(f, "{}.main.{}", self.top, i),
            Some((Branch::Shortcut, i)) => write!(f, "{}.shortcut.{}", self.top, i),
        }
    }
}

/// Fully connected layer, `weight` is `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.rank(), 2);
        assert_eq!(bias.shape(), &[weight.shape()[0]]);
        Self { weight, bias }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// 2-D convolution, `weight` is `[c_out, c_in, kh, kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < kh || wp < kw || self.stride == 0 {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    /// Fresh layer with unit scale, zero shift and standard-normal running statistics.
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Diagonal of the normalization matrix, `1 / sqrt(var + eps)`.
    pub fn inv_std(&self) -> Vec<f64> {
        self.running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect()
    }
}

/// Non-overlapping average pooling (`stride == kernel`).
#[derive(Clone, Debug, PartialEq)]
pub struct AvgPool {
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub main: Vec<Layer>,
    /// Empty means identity.
    pub shortcut: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    AvgPool(AvgPool),
    Flatten,
    Residual(Residual),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::AvgPool(_) => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Residual(_) => "residual",
        }
    }

    /// Output shape for a single sample of the given shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Layer::Dense(d) => {
                if input != [d.in_features()] {
                    return Err(format!("dense expects input [{}], got {:?}", d.in_features(), input));
                }
                Ok(vec![d.out_features()])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(format!("conv2d expects [{}, h, w], got {:?}", c.in_channels(), input));
                }
                let (oh, ow) = c
                    .output_hw(input[1], input[2])
                    .ok_or_else(|| format!("conv2d kernel does not fit input {:?}", input))?;
                Ok(vec![c.out_channels(), oh, ow])
            }
            Layer::BatchNorm(bn) => {
                let ok = (input.len() == 1 || input.len() == 3) && input[0] == bn.channels();
                if !ok {
                    return Err(format!("batchnorm over {} channels got {:?}", bn.channels(), input));
                }
                for (name, t) in [
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    if t.len() != bn.channels() {
                        return Err(format!("batchnorm {name} has {} entries", t.len()));
                    }
                }
                if bn.running_var.data().iter().any(|v| *v <= 0.0) {
                    return Err("batchnorm running_var must be positive".into());
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::AvgPool(p) => {
                if input.len() != 3
                    || p.kernel == 0
                    || !input[1].is_multiple_of(p.kernel)
                    || !input[2].is_multiple_of(p.kernel)
                {
                    return Err(format!("avgpool kernel {} does not tile input {:?}", p.kernel, input));
                }
                Ok(vec![input[0], input[1] / p.kernel, input[2] / p.kernel])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Residual(r) => {
                let mut main = input.to_vec();
                for (i, b) in r.main.iter().enumerate() {
                    main = b.output_shape(&main).map_err(|e| format!("main[{i}]: {e}"))?;
                }
                let mut short = input.to_vec();
                for (i, b) in r.shortcut.iter().enumerate() {
                    if matches!(b, Layer::Residual(_)) {
                        return Err("nested residual blocks are not supported".into());
                    }
                    short = b.output_shape(&short).map_err(|e| format!("shortcut[{i}]: {e}"))?;
                }
                if r.main.iter().any(|b| matches!(b, Layer::Residual(_))) {
                    return Err("nested residual blocks are not supported".into());
                }
                if main != short {
                    return Err(format!(
                        "residual main path yields {:?} but shortcut yields {:?}",
                        main, short
                    ));
                }
                Ok(main)
            }
        }
    }

    /// Trainable tensors in a fixed order (weight then bias; gamma then beta).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Residual(r) => r.main.iter().chain(&r.shortcut).flat_map(Layer::params).collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Residual(r) => r
                .main
                .iter_mut()
                .chain(r.shortcut.iter_mut())
                .flat_map(Layer::params_mut)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(_) | Layer::Conv2d(_) | Layer::BatchNorm(_) => 2,
            Layer::Residual(r) => r.main.iter().chain(&r.shortcut).map(Layer::param_count).sum(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub blocks: Vec<Layer>,
    /// Per-sample input shape, `[d]` or `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

impl Network {
    pub fn new(blocks: Vec<Layer>, input_shape: Vec<usize>, class_count: usize) -> Result<Self, NnError> {
        let net = Self {
            blocks,
            input_shape,
            class_count,
        };
        net.validate()?;
        Ok(net)
    }

    /// Per-sample input shape of every top-level block, plus the final output shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            cur = b
                .output_shape(&cur)
                .map_err(|detail| NnError::Shape { block: i, detail })?;
            shapes.push(cur.clone());
        }
        if cur != [self.class_count] {
            return Err(NnError::Shape {
                block: self.blocks.len().saturating_sub(1),
                detail: format!(
                    "network output {:?} does not match class count {}",
                    cur, self.class_count
                ),
            });
        }
        Ok(shapes)
    }

    pub fn block(&self, at: BlockRef) -> Option<&Layer> {
        let top = self.blocks.get(at.top)?;
        match (at.inner, top) {
            (None, l) => Some(l),
            (Some((Branch::Main, i)), Layer::Residual(r)) => r.main.get(i),
            (Some((Branch::Shortcut, i)), Layer::Residual(r)) => r.shortcut.get(i),
            _ => None,
        }
    }

    pub fn block_mut(&mut self, at: BlockRef) -> Option<&mut Layer> {
        let top = self.blocks.get_mut(at.top)?;
        match (at.inner, top) {
            (None, l) => Some(l),
            (Some((Branch::Main, i)), Layer::Residual(r)) => r.main.get_mut(i),
            (Some((Branch::Shortcut, i)), Layer::Residual(r)) => r.shortcut.get_mut(i),
            _ => None,
        }
    }

    /// Every block address in forward order (a residual block precedes its main path, which precedes its shortcut).
    pub fn block_refs(&self) -> Vec<BlockRef> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(BlockRef::top(i));
            if let Layer::Residual(r) = b {
                out.extend((0..r.main.len()).map(|j| BlockRef::main(i, j)));
                out.extend((0..r.shortcut.len()).map(|j| BlockRef::shortcut(i, j)));
            }
        }
        out
    }

    /// BatchNorm blocks in forward order.
    pub fn batch_norm_refs(&self) -> Vec<BlockRef> {
        self.block_refs()
            .into_iter()
            .filter(|r| matches!(self.block(*r), Some(Layer::BatchNorm(_))))
            .collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.batch_norm_refs().is_empty()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Total number of scalar weights in Dense and Conv2d layers (biases included).
    pub fn weight_count(&self) -> usize {
        self.block_refs()
            .into_iter()
            .map(|r| match self.block(r) {
                Some(Layer::Dense(d)) => d.weight.len() + d.bias.len(),
                Some(Layer::Conv2d(c)) => c.weight.len() + c.bias.len(),
                _ => 0,
            })
            .sum()
    }

    pub(crate) fn check_batch(&self, batch: &Tensor) -> Result<(), NnError> {
        if batch.rank() == 0 || batch.shape()[1..] != self.input_shape[..] {
            return Err(NnError::InputShape {
                expected: self.input_shape.clone(),
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(out: usize, inp: usize) -> Layer {
        Layer::Dense(Dense::new(Tensor::zeros(&[out, inp]), Tensor::zeros(&[out])))
    }

    #[test]
    fn validate_names_offending_block() {
        let err = Network::new(vec![dense(3, 2), Layer::Relu, dense(2, 4)], vec![2], 2).unwrap_err();
        match err {
            NnError::Shape { block, .. } => assert_eq!(block, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn residual_shape_mismatch_rejected() {
        let res = Layer::Residual(Residual {
            main: vec![dense(3, 2)],
            shortcut: vec![],
        });
        let err = Network::new(vec![res, dense(2, 3)], vec![2], 2).unwrap_err();
        assert!(matches!(err, NnError::Shape { block: 0, .. }));
    }

    #[test]
    fn block_refs_walk_residual_paths() {
        let res = Layer::Residual(Residual {
            main: vec![dense(2, 2), Layer::Relu],
            shortcut: vec![dense(2, 2)],
        });
        let net = Network::new(vec![res, dense(2, 2)], vec![2], 2).unwrap();
        assert_eq!(
            net.block_refs(),
            vec![
                BlockRef::top(0),
                BlockRef::main(0, 0),
                BlockRef::main(0, 1),
                BlockRef::shortcut(0, 0),
                BlockRef::top(1)
            ]
        );
        assert_eq!(net.params().len(), 6);
    }

    #[test]
    fn nonpositive_running_var_rejected() {
        let mut bn = BatchNorm::identity(2, 1e-5);
        bn.running_var.data_mut()[1] = 0.0;
        let err = Network::new(vec![Layer::BatchNorm(bn)], vec![2], 2).unwrap_err();
        assert!(matches!(err, NnError::Shape { block: 0, .. }));
    }
}
