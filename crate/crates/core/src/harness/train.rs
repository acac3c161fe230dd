use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Dataset;
use crate::nn::{cross_entropy, BlockRef, Layer, Network, NnError, TrainPass};

/// Momentum of the running-statistics moving average: `r ← (1 − m)·r + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "lambda")]
pub enum WeightDecay {
    #[default]
    None,
    /// Adds `λ·sign(w)` to the gradient of every Dense/Conv weight.
    L1(f64),
    /// Adds `2λ·w` to the gradient of every Dense/Conv weight.
    L2(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: WeightDecay,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: WeightDecay::None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("dataset has {actual} classes but the network predicts {expected}")]
    Classes { expected: usize, actual: usize },
    #[error(transparent)]
    Network(#[from] NnError),
}

/// Positions per channel at each BatchNorm input, for the unbiased variance correction.
fn bn_positions(network: &Network) -> Result<HashMap<BlockRef, usize>, NnError> {
    fn walk(
        seq: &[Layer],
        make: &dyn Fn(usize) -> BlockRef,
        mut shape: Vec<usize>,
        out: &mut HashMap<BlockRef, usize>,
    ) -> Result<Vec<usize>, NnError> {
        for (i, layer) in seq.iter().enumerate() {
            match layer {
                Layer::BatchNorm(_) => {
                    out.insert(make(i), shape[1..].iter().product());
                }
                Layer::Residual(r) => {
                    walk(&r.main, &|j| BlockRef::main(i, j), shape.clone(), out)?;
                    walk(&r.shortcut, &|j| BlockRef::shortcut(i, j), shape.clone(), out)?;
                }
                _ => {}
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|detail| NnError::Shape { block: i, detail })?;
        }
        Ok(shape)
    }
    let mut out = HashMap::new();
    walk(&network.blocks, &BlockRef::top, network.input_shape.clone(), &mut out)?;
    Ok(out)
}

/// Which parameters (in [`Network::params`] order) are Dense/Conv weights.
fn weight_mask(network: &Network) -> Vec<bool> {
    network.params().iter().map(|p| p.rank() >= 2).collect()
}

/// Minibatch SGD with heavy-ball momentum (`v ← μv + g, θ ← θ − lr·v`) on the mean
/// cross-entropy. BatchNorm uses batch statistics while training and keeps an exponential
/// moving average of them (unbiased variance) for inference. Batches of fewer than two
/// examples are skipped.
pub fn train(network: &Network, data: &Dataset, config: &TrainConfig) -> Result<Network, TrainError> {
    if config.epochs == 0 || config.batch == 0 {
        return Err(TrainError::Config("epochs and batch must be positive".into()));
    }
    if config.lr.is_nan() || config.lr < 0.0 || !(0.0..1.0).contains(&config.momentum) {
        return Err(TrainError::Config("need lr >= 0 and 0 <= momentum < 1".into()));
    }
    if data.class_count > network.class_count || data.labels.iter().any(|&l| l >= network.class_count) {
        return Err(TrainError::Classes {
            expected: network.class_count,
            actual: data.class_count,
        });
    }
    network.check_batch(&data.features)?;
    let mut net = network.clone();
    let positions = bn_positions(&net)?;
    let is_weight = weight_mask(&net);
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let x = data.features.gather_batch(chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (logits, pass) = TrainPass::forward(&net, &x)?;
            let (loss, dlogits) = cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let grads = pass.backward(&net, &dlogits);
            for (((param, grad), v), &weight) in net
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(&mut velocity)
                .zip(&is_weight)
            {
                for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                    let decay = match (weight, config.weight_decay) {
                        (true, WeightDecay::L1(l)) => l * p.signum(),
                        (true, WeightDecay::L2(l)) => 2.0 * l * *p,
                        _ => 0.0,
                    };
                    *v = config.momentum * *v + g + decay;
                    *p -= config.lr * *v;
                }
            }
            for (at, mean, var) in &pass.bn_stats {
                let count = (chunk.len() * positions[at]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                if let Some(Layer::BatchNorm(bn)) = net.block_mut(*at) {
                    for (r, m) in bn.running_mean.data_mut().iter_mut().zip(mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    for (r, v) in bn.running_var.data_mut().iter_mut().zip(var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                    }
                }
            }
        }
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Diverged { epoch });
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{evaluate, Architecture, SyntheticTask};

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let task = SyntheticTask::default();
        let data = task.sample(128, 0);
        let net = Architecture::MlpBn { width: 8 }.build(16, 8, 0).unwrap();
        let config = TrainConfig {
            epochs: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let trained = train(&net, &data, &config).unwrap();
        assert_eq!(net.params(), trained.params());
    }

    #[test]
    fn separable_task_is_learned() {
        let task = SyntheticTask {
            separation: 8.0,
            seed: 2,
            ..SyntheticTask::default()
        };
        let splits = task.splits(1024, 512, 0);
        for arch in [
            Architecture::MlpBn { width: 32 },
            Architecture::ConvBn { channels: 8 },
            Architecture::Residual { width: 32 },
        ] {
            let net = arch.build(16, 8, 1).unwrap();
            let shape = arch.input_shape(16).unwrap();
            let train_set = splits.train.reshaped(&shape).unwrap();
            let trained = train(
                &net,
                &train_set,
                &TrainConfig {
                    epochs: 5,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
            let acc = evaluate(&trained, &splits.test.reshaped(&shape).unwrap()).unwrap();
            assert!(acc >= 0.95, "{arch:?}: {acc}");
        }
    }

    #[test]
    fn unbiased_positions_account_for_spatial_extent() {
        let net = Architecture::ConvBn { channels: 4 }.build(16, 3, 0).unwrap();
        let p = bn_positions(&net).unwrap();
        assert_eq!(p[&BlockRef::top(1)], 16);
        let res = Architecture::Residual { width: 4 }.build(16, 3, 0).unwrap();
        assert_eq!(bn_positions(&res).unwrap()[&BlockRef::main(3, 1)], 1);
    }
}
