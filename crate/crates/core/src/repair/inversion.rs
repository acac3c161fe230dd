use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RepairError;
use crate::nn::{input_gradient, loss_value, LossSpec, Network};
use crate::tensor::Tensor;

/// Deep Inversion hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DIConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the cross-entropy towards the round-robin target labels.
    pub ce_weight: f64,
    pub bn_weight: f64,
    pub l2_weight: f64,
    pub tv_weight: f64,
    pub seed: u64,
}

impl Default for DIConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            steps: 500,
            lr: 0.05,
            momentum: 0.9,
            ce_weight: 1.0,
            bn_weight: 1.0,
            l2_weight: 1e-4,
            tv_weight: 1e-4,
            seed: 0,
        }
    }
}

impl DIConfig {
    pub fn validate(&self) -> Result<(), RepairError> {
        let weights = [self.ce_weight, self.bn_weight, self.l2_weight, self.tv_weight];
        if self.batch == 0 || self.steps == 0 {
            return Err(RepairError::Config("batch and steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(RepairError::Config("need lr > 0 and 0 <= momentum < 1".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(RepairError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn loss_spec(&self, labels: Vec<usize>) -> LossSpec {
        LossSpec {
            targets: Some(labels),
            ce_weight: self.ce_weight,
            bn_weight: self.bn_weight,
            l2_weight: self.l2_weight,
            tv_weight: self.tv_weight,
        }
    }
}

/// A synthesized batch and how it was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub batch: Tensor,
    pub labels: Vec<usize>,
    /// Objective at the start of every step, followed by the final objective.
    pub loss: Vec<f64>,
}

/// Synthesizes inputs that the (frozen) network classifies as round-robin labels while
/// matching its stored BatchNorm statistics.
///
/// Inputs start from a seeded standard normal and follow heavy-ball descent
/// `v ← μv + ∇, x ← x − lr·v`.
pub fn deep_inversion(network: &Network, config: &DIConfig) -> Result<Inversion, RepairError> {
    config.validate()?;
    if config.bn_weight > 0.0 && !network.has_batch_norm() {
        return Err(RepairError::NoBatchNorm);
    }
    let labels: Vec<usize> = (0..config.batch).map(|i| i % network.class_count).collect();
    let spec = config.loss_spec(labels.clone());
    let mut shape = vec![config.batch];
    shape.extend_from_slice(&network.input_shape);
    let len = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init: Vec<f64> = StandardNormal.sample_iter(&mut rng).take(len).collect();
    let mut x = Tensor::new(shape, init).expect("shape matches length");
    let mut velocity = vec![0.0; len];
    let mut loss = Vec::with_capacity(config.steps + 1);
    for _ in 0..config.steps {
        let (l, grad) = input_gradient(network, &x, &spec)?;
        loss.push(l);
        for ((xv, v), g) in x.data_mut().iter_mut().zip(&mut velocity).zip(grad.data()) {
            *v = config.momentum * *v + g;
            *xv -= config.lr * *v;
        }
    }
    loss.push(loss_value(network, &x, &spec)?);
    Ok(Inversion { batch: x, labels, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward_trace, BatchNorm, Dense, Layer};
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn mlp_bn(rng: &mut ChaCha8Rng) -> Network {
        let mut bn = BatchNorm::identity(16, 1e-5);
        bn.running_mean = rand_tensor(rng, &[16], 0.5);
        bn.running_var = Tensor::new(vec![16], (0..16).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
        Network::new(
            vec![
                Layer::Dense(Dense::new(rand_tensor(rng, &[16, 8], 0.6), Tensor::zeros(&[16]))),
                Layer::BatchNorm(bn),
                Layer::Relu,
                Layer::Dense(Dense::new(rand_tensor(rng, &[4, 16], 0.5), Tensor::zeros(&[4]))),
            ],
            vec![8],
            4,
        )
        .unwrap()
    }

    fn window_ok(loss: &[f64]) -> bool {
        loss.windows(11).all(|w| w[10] <= 1.05 * w[0])
    }

    #[test]
    fn convex_cross_entropy_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::new(
            vec![Layer::Dense(Dense::new(
                rand_tensor(&mut rng, &[3, 5], 1.0),
                Tensor::zeros(&[3]),
            ))],
            vec![5],
            3,
        )
        .unwrap();
        let config = DIConfig {
            batch: 6,
            steps: 100,
            momentum: 0.0,
            bn_weight: 0.0,
            l2_weight: 0.0,
            tv_weight: 0.0,
            ..DIConfig::default()
        };
        let inv = deep_inversion(&net, &config).unwrap();
        assert!(inv.loss.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(inv.loss.last() < inv.loss.first());
    }

    #[test]
    fn constant_image_with_tv_only_is_stationary() {
        let net = Network::new(
            vec![
                Layer::Flatten,
                Layer::Dense(Dense::new(Tensor::zeros(&[2, 9]), Tensor::zeros(&[2]))),
            ],
            vec![1, 3, 3],
            2,
        )
        .unwrap();
        let spec = LossSpec {
            tv_weight: 1.0,
            ..LossSpec::default()
        };
        let x = Tensor::filled(&[2, 1, 3, 3], 0.7);
        let (l, g) = input_gradient(&net, &x, &spec).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn requires_batch_norm() {
        let net = Network::new(
            vec![Layer::Dense(Dense::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])))],
            vec![2],
            2,
        )
        .unwrap();
        assert!(matches!(
            deep_inversion(&net, &DIConfig::default()),
            Err(RepairError::NoBatchNorm)
        ));
    }

    #[test]
    fn deterministic_and_matches_bn_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = mlp_bn(&mut rng);
        let config = DIConfig {
            seed: 9,
            ..DIConfig::default()
        };
        let a = deep_inversion(&net, &config).unwrap();
        let b = deep_inversion(&net, &config).unwrap();
        assert_eq!(a.batch, b.batch);
        assert!(window_ok(&a.loss), "loss trace drifts upward");
        let site = crate::nn::BlockRef::top(0);
        let trace = forward_trace(&net, &a.batch, &[site], false).unwrap();
        let Some(Layer::BatchNorm(bn)) = net.block(crate::nn::BlockRef::top(1)) else {
            panic!()
        };
        let close = trace.sites[0]
            .mean
            .iter()
            .zip(bn.running_mean.data().iter().zip(bn.running_var.data()))
            .filter(|(m, (rm, rv))| (*m - *rm).abs() <= 0.25 * rv.sqrt())
            .count();
        assert!(close * 10 >= 16 * 8, "{close}/16 channels matched");
    }
}
