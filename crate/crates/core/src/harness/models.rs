use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{AvgPool, BatchNorm, Conv2d, Dense, Layer, Network, NnError, Residual};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

/// The toy architecture catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "arch")]
pub enum Architecture {
    /// Three Dense-BN-ReLU blocks and a Dense classifier.
    MlpBn { width: usize },
    /// Three Dense-ReLU blocks and a Dense classifier.
    Mlp { width: usize },
    /// Two 3×3 Conv-BN-ReLU blocks, 2×2 average pooling and a Dense classifier on a
    /// single-channel square image.
    ConvBn { channels: usize },
    /// Dense-BN-ReLU stem, one identity-shortcut block (Dense-BN-ReLU-Dense-BN), ReLU and a
    /// Dense classifier.
    Residual { width: usize },
}

impl Architecture {
    /// Network input shape for flat features of length `dim`.
    pub fn input_shape(&self, dim: usize) -> Result<Vec<usize>, NnError> {
        match self {
            Architecture::ConvBn { .. } => {
                let side = (dim as f64).sqrt().round() as usize;
                if side * side != dim || !side.is_multiple_of(2) {
                    return Err(NnError::InputShape {
                        expected: vec![1, side, side],
                        actual: vec![dim],
                    });
                }
                Ok(vec![1, side, side])
            }
            _ => Ok(vec![dim]),
        }
    }

    /// Kaiming-normal weights (`std = √(2/fan_in)`), zero biases, identity BatchNorm.
    pub fn build(&self, dim: usize, classes: usize, seed: u64) -> Result<Network, NnError> {
        let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
        let input_shape = self.input_shape(dim)?;
        let blocks = match *self {
            Architecture::MlpBn { width } | Architecture::Mlp { width } => {
                let bn = matches!(self, Architecture::MlpBn { .. });
                let mut blocks = Vec::new();
                let mut fan_in = dim;
                for _ in 0..3 {
                    blocks.push(init.dense(fan_in, width));
                    if bn {
                        blocks.push(Layer::BatchNorm(BatchNorm::identity(width, BN_EPS)));
                    }
                    blocks.push(Layer::Relu);
                    fan_in = width;
                }
                blocks.push(init.dense(width, classes));
                blocks
            }
            Architecture::ConvBn { channels } => {
                let side = input_shape[1];
                vec![
                    init.conv(1, channels),
                    Layer::BatchNorm(BatchNorm::identity(channels, BN_EPS)),
                    Layer::Relu,
                    init.conv(channels, channels),
                    Layer::BatchNorm(BatchNorm::identity(channels, BN_EPS)),
                    Layer::Relu,
                    Layer::AvgPool(AvgPool { kernel: 2 }),
                    Layer::Flatten,
                    init.dense(channels * (side / 2) * (side / 2), classes),
                ]
            }
            Architecture::Residual { width } => vec![
                init.dense(dim, width),
                Layer::BatchNorm(BatchNorm::identity(width, BN_EPS)),
                Layer::Relu,
                Layer::Residual(Residual {
                    main: vec![
                        init.dense(width, width),
                        Layer::BatchNorm(BatchNorm::identity(width, BN_EPS)),
                        Layer::Relu,
                        init.dense(width, width),
                        Layer::BatchNorm(BatchNorm::identity(width, BN_EPS)),
                    ],
                    shortcut: Vec::new(),
                }),
                Layer::Relu,
                init.dense(width, classes),
            ],
        };
        Network::new(blocks, input_shape, classes)
    }
}

struct Init(ChaCha8Rng);

impl Init {
    fn normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), dist.sample_iter(&mut self.0).take(n).collect()).expect("sized")
    }

    fn dense(&mut self, fan_in: usize, out: usize) -> Layer {
        Layer::Dense(Dense::new(self.normal(&[out, fan_in], fan_in), Tensor::zeros(&[out])))
    }

    fn conv(&mut self, c_in: usize, c_out: usize) -> Layer {
        Layer::Conv2d(Conv2d {
            weight: self.normal(&[c_out, c_in, 3, 3], c_in * 9),
            bias: Tensor::zeros(&[c_out]),
            stride: 1,
            padding: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folding::discover_groups;

    #[test]
    fn catalog_builds_and_folds() {
        let archs = [
            Architecture::MlpBn { width: 8 },
            Architecture::Mlp { width: 8 },
            Architecture::ConvBn { channels: 4 },
            Architecture::Residual { width: 8 },
        ];
        for arch in archs {
            let net = arch.build(16, 3, 1).unwrap();
            assert_eq!(net, arch.build(16, 3, 1).unwrap());
            assert!(!discover_groups(&net).unwrap().groups.is_empty(), "{arch:?}");
        }
        assert!(Architecture::ConvBn { channels: 4 }.build(15, 3, 0).is_err());
    }
}
