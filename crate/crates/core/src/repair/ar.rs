use serde::{Deserialize, Serialize};

use super::RepairError;
use crate::clustering::Assignment;
use crate::folding::matrix::normalized_weight_rows;
use crate::folding::{fold_network_with, ArRecord, FoldError, FoldPlan, FoldReport, RepairMode};
use crate::nn::{Layer, Network};
use crate::tensor::{dot, Matrix};

/// Data-free correlation estimate for one cluster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCorrelation {
    pub size: usize,
    /// Mean pairwise cosine similarity of the members' normalized weight rows.
    pub correlation: f64,
    pub scale: f64,
}

/// `E[c] = 1/(N²−N) Σ_{i≠j} ⟨w_i, w_j⟩ / (‖w_i‖‖w_j‖)` for every cluster, assuming
/// uncorrelated unit-variance inputs to the layer. Singletons report `E = 1`.
pub fn estimate_cluster_correlation(
    rows: &Matrix,
    assignment: &Assignment,
) -> Result<Vec<ClusterCorrelation>, RepairError> {
    assert_eq!(rows.rows(), assignment.n(), "one row per channel");
    let norms: Vec<f64> = (0..rows.rows()).map(|i| dot(rows.row(i), rows.row(i)).sqrt()).collect();
    assignment
        .members()
        .into_iter()
        .enumerate()
        .map(|(cluster, members)| {
            let size = members.len();
            if size == 1 {
                return Ok(ClusterCorrelation {
                    size,
                    correlation: 1.0,
                    scale: 1.0,
                });
            }
            if let Some(&row) = members.iter().find(|&&i| norms[i] == 0.0) {
                return Err(RepairError::ZeroRow { cluster, row });
            }
            let mut total = 0.0;
            for &i in &members {
                for &j in &members {
                    if i != j {
                        total += dot(rows.row(i), rows.row(j)) / (norms[i] * norms[j]);
                    }
                }
            }
            let correlation = total / (size * size - size) as f64;
            Ok(ClusterCorrelation {
                size,
                correlation,
                scale: ar_scale(size, correlation),
            })
        })
        .collect()
}

/// Fold-AR variance correction `N/√(N + (N²−N)·E)`.
///
/// `E` is clamped to `[−1/(N−1) + 10⁻³, 1]` so the radicand stays positive.
pub fn ar_scale(n: usize, e: f64) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let nf = n as f64;
    let e = e.clamp(-1.0 / (nf - 1.0) + 1e-3, 1.0);
    nf / (nf + (nf * nf - nf) * e).sqrt()
}

/// Fold-AR: fold with the BN-AR matrix, then multiply each folded BatchNorm gamma by its
/// cluster's scale. Correlations come from the group's weights just before its fold.
pub fn apply_fold_ar(network: &Network, plan: &FoldPlan) -> Result<(Network, FoldReport), RepairError> {
    let plan = FoldPlan {
        repair: RepairMode::Ar,
        ..plan.clone()
    };
    let mut failure = None;
    let result = fold_network_with(network, &plan, |step, net, report| {
        if !step.group.has_batch_norm() {
            return Err(FoldError::NoBatchNorm(step.index));
        }
        for p in &step.group.producers {
            let bn_at = p.batch_norm.expect("checked above");
            let rows = normalized_weight_rows(step.before, p.at, bn_at, step.group.channels)?;
            let stats = match estimate_cluster_correlation(&rows, step.assignment) {
                Ok(s) => s,
                Err(e) => {
                    failure = Some(e);
                    return Err(FoldError::Topology("correlation estimate failed".into()));
                }
            };
            let Some(Layer::BatchNorm(bn)) = net.block_mut(bn_at) else {
                unreachable!("group BatchNorm exists")
            };
            for (g, s) in bn.gamma.data_mut().iter_mut().zip(&stats) {
                *g *= s.scale;
            }
            report.ar.push(ArRecord {
                producer: p.at,
                correlation: stats.iter().map(|s| s.correlation).collect(),
                scales: stats.iter().map(|s| s.scale).collect(),
            });
        }
        Ok(())
    });
    match (result, failure) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, BatchNorm, Dense};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_point_values() {
        assert!((ar_scale(2, 0.0) - 2f64.sqrt()).abs() < 1e-12);
        for n in 1..20 {
            assert!((ar_scale(n, 1.0) - 1.0).abs() < 1e-12);
        }
        assert_eq!(ar_scale(1, -3.0), 1.0);
        assert!(ar_scale(2, -1.0).is_finite());
    }

    #[test]
    fn scale_bounds_on_nonnegative_correlation() {
        for n in 2..12 {
            for step in 0..=20 {
                let e = step as f64 / 20.0;
                let s = ar_scale(n, e);
                assert!(s >= 1.0 - 1e-12 && s <= (n as f64).sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn identical_and_orthogonal_rows() {
        let rows = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 0.0], vec![0.0, 3.0]]);
        let a = Assignment::new(vec![0, 0, 1, 1], 2).unwrap();
        let c = estimate_cluster_correlation(&rows, &a).unwrap();
        assert!((c[0].correlation - 1.0).abs() < 1e-12);
        assert!((c[0].scale - 1.0).abs() < 1e-12);
        assert_eq!(c[1].correlation, 0.0);
        assert!((c[1].scale - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_row_in_cluster_is_an_error() {
        let rows = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![0.0, 0.0]]);
        let a = Assignment::new(vec![0, 0, 1], 2).unwrap();
        assert!(matches!(
            estimate_cluster_correlation(&rows, &a),
            Err(RepairError::ZeroRow { cluster: 0, row: 0 })
        ));
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Dense(6→8)+BN+ReLU+Dense(8→3) whose hidden channels come in duplicated pairs.
    fn duplicated_mlp(rng: &mut ChaCha8Rng, bn: bool) -> Network {
        let w = rand_tensor(rng, &[4, 6]);
        let b = rand_tensor(rng, &[4]);
        let dup = |t: &Tensor, shape: Vec<usize>| {
            let row = t.len() / 4;
            let data = (0..8)
                .flat_map(|i| t.data()[(i / 2) * row..(i / 2 + 1) * row].to_vec())
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        let mut blocks = vec![Layer::Dense(Dense::new(dup(&w, vec![8, 6]), dup(&b, vec![8])))];
        if bn {
            let mut norm = BatchNorm::identity(8, 1e-5);
            norm.gamma = dup(&rand_tensor(rng, &[4]), vec![8]);
            norm.running_var = dup(&Tensor::filled(&[4], 2.0), vec![8]);
            blocks.push(Layer::BatchNorm(norm));
        }
        blocks.push(Layer::Relu);
        let v = rand_tensor(rng, &[3, 4]);
        let cols = (0..24).map(|i| v.data()[(i / 8) * 4 + (i % 8) / 2]).collect();
        blocks.push(Layer::Dense(Dense::new(
            Tensor::new(vec![3, 8], cols).unwrap(),
            rand_tensor(rng, &[3]),
        )));
        Network::new(blocks, vec![6], 3).unwrap()
    }

    #[test]
    fn identity_plan_leaves_network_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = duplicated_mlp(&mut rng, true);
        let (folded, report) = apply_fold_ar(&net, &FoldPlan::uniform(0.0, RepairMode::Ar, 0)).unwrap();
        assert_eq!(folded, net);
        assert!(report.groups[0].ar[0].scales.iter().all(|s| *s == 1.0));
    }

    #[test]
    fn duplicates_fold_losslessly_with_unit_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = duplicated_mlp(&mut rng, true);
        let (folded, report) = apply_fold_ar(&net, &FoldPlan::uniform(0.5, RepairMode::Ar, 0)).unwrap();
        let ar = &report.groups[0].ar[0];
        assert!(ar.correlation.iter().all(|e| (e - 1.0).abs() < 1e-12));
        assert!(ar.scales.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let x = rand_tensor(&mut rng, &[16, 6]);
        let diff = forward(&folded, &x).unwrap().max_abs_diff(&forward(&net, &x).unwrap());
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn batch_norm_free_group_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = duplicated_mlp(&mut rng, false);
        let err = apply_fold_ar(&net, &FoldPlan::uniform(0.5, RepairMode::Ar, 0)).unwrap_err();
        assert!(matches!(err, RepairError::Fold(FoldError::NoBatchNorm(0))));
    }

    fn oracle(rows: &Matrix, members: &[usize]) -> f64 {
        let n = members.len();
        let mut total = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let (x, y) = (rows.row(members[a]), rows.row(members[b]));
                let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
                for j in 0..x.len() {
                    xy += x[j] * y[j];
                    xx += x[j] * x[j];
                    yy += y[j] * y[j];
                }
                total += xy / (xx * yy).sqrt();
            }
        }
        total / (n * n - n) as f64
    }

    proptest! {
        #[test]
        fn correlation_matches_double_loop(seed in 0u64..10_000, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = Matrix::new(4, d, (0..4 * d).map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect());
            let a = Assignment::new(vec![0; 4], 1).unwrap();
            let c = estimate_cluster_correlation(&rows, &a).unwrap();
            prop_assert!((c[0].correlation - oracle(&rows, &[0, 1, 2, 3])).abs() < 1e-12);
        }
    }
}
