use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Labelled examples; `features` has shape `[count, ...input_shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Views every example with a new per-example shape of the same size.
    pub fn reshaped(&self, input_shape: &[usize]) -> Option<Dataset> {
        let size: usize = input_shape.iter().product();
        if size != self.features.row_len() {
            return None;
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(input_shape);
        Some(Dataset {
            features: self.features.clone().reshape(shape),
            labels: self.labels.clone(),
            class_count: self.class_count,
        })
    }

    /// Consecutive batches of at most `size` examples.
    pub fn batches(&self, size: usize) -> Vec<Tensor> {
        (0..self.len())
            .step_by(size.max(1))
            .map(|s| self.features.slice_batch(s, (s + size).min(self.len())))
            .collect()
    }
}

/// Gaussian-cluster classification task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub classes: usize,
    pub dim: usize,
    /// Distance of every class center from the origin.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 16,
            separation: 4.0,
            seed: 0,
        }
    }
}

/// The three splits of a synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub calibration: Dataset,
}

impl SyntheticTask {
    /// Class centers: uniform directions on the unit sphere scaled by `separation`.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = StandardNormal.sample_iter(&mut rng).take(self.dim).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| self.separation * x / norm).collect()
            })
            .collect()
    }

    /// `count` examples with uniformly drawn labels and unit isotropic noise, drawn from
    /// random stream `stream` so different splits are independent. Features are rounded
    /// through `f32` so they survive the dataset file format unchanged.
    pub fn sample(&self, count: usize, stream: u64) -> Dataset {
        assert!(self.classes >= 2, "a task needs at least two classes");
        let centers = self.centers();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut labels = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            let label = rng.random_range(0..self.classes);
            labels.push(label);
            for &c in &centers[label] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(c + noise);
            }
        }
        let mut features = Tensor::new(vec![count, self.dim], data).expect("sized above");
        features.round_to_f32();
        Dataset {
            features,
            labels,
            class_count: self.classes,
        }
    }

    /// Train, test and calibration splits of the given sizes.
    pub fn splits(&self, train: usize, test: usize, calibration: usize) -> Splits {
        Splits {
            train: self.sample(train, 0),
            test: self.sample(test, 1),
            calibration: self.sample(calibration, 2),
        }
    }

    /// The default 4096 / 1024 / 512 split sizes.
    pub fn default_splits(&self) -> Splits {
        self.splits(4096, 1024, 512)
    }
}
