use super::RepairError;
use crate::clustering::Assignment;
use crate::folding::{discover_groups, FoldReport};
use crate::nn::{bn_recalibrate, forward_trace, Layer, Network};
use crate::tensor::Tensor;

/// Floor on the folded channel std before dividing by it.
const STD_FLOOR: f64 = 1e-8;

/// Fold-R: data-driven statistics repair of `folded` against `original`.
///
/// BatchNorm layers are recalibrated on the calibration set. Producers of BN-free groups
/// get a per-channel affine fused into their rows and bias, processed front to back, so
/// each folded channel's output mean and std equal the cluster means of the original
/// members' mean and std. When both kinds are present, BatchNorm is recalibrated before
/// and again after the affine corrections.
pub fn data_repair(
    original: &Network,
    folded: &Network,
    report: &FoldReport,
    calibration: &[Tensor],
) -> Result<Network, RepairError> {
    if calibration.is_empty() || calibration.iter().all(|b| b.batch() == 0) {
        return Err(RepairError::EmptyCalibration);
    }
    let data = Tensor::concat_batches(calibration);
    let mut net = if folded.has_batch_norm() {
        bn_recalibrate(folded, calibration)?
    } else {
        folded.clone()
    };
    let groups = discover_groups(original)?.groups;
    let mut touched = false;
    for (group, gr) in groups.iter().zip(&report.groups) {
        if group.has_batch_norm() {
            continue;
        }
        let assignment = Assignment::new(gr.labels.clone(), gr.k).map_err(crate::folding::FoldError::from)?;
        for p in &group.producers {
            let target = forward_trace(original, &data, &[p.at], false)?;
            let target = &target.sites[0];
            let mu_t = assignment.mean_of(&target.mean);
            let sd_t = assignment.mean_of(&target.var.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
            let current = forward_trace(&net, &data, &[p.at], false)?;
            let current = &current.sites[0];
            let (weight, bias) = match net.block_mut(p.at) {
                Some(Layer::Dense(d)) => (&mut d.weight, &mut d.bias),
                Some(Layer::Conv2d(c)) => (&mut c.weight, &mut c.bias),
                _ => unreachable!("group producers are dense or conv"),
            };
            let row = weight.len() / gr.k;
            for c in 0..gr.k {
                let s = sd_t[c] / current.var[c].sqrt().max(STD_FLOOR);
                for w in &mut weight.data_mut()[c * row..(c + 1) * row] {
                    *w *= s;
                }
                let b = &mut bias.data_mut()[c];
                *b = s * *b + mu_t[c] - s * current.mean[c];
            }
            touched = true;
        }
    }
    if touched && net.has_batch_norm() {
        net = bn_recalibrate(&net, calibration)?;
    }
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folding::{fold_network, FoldPlan, RepairMode};
    use crate::nn::{forward, BatchNorm, Dense};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mlp(rng: &mut ChaCha8Rng, bn: bool) -> Network {
        let mut blocks = vec![Layer::Dense(Dense::new(
            rand_tensor(rng, &[12, 6]),
            rand_tensor(rng, &[12]),
        ))];
        if bn {
            let mut b = BatchNorm::identity(12, 1e-5);
            b.gamma = rand_tensor(rng, &[12]);
            blocks.push(Layer::BatchNorm(b));
        }
        blocks.push(Layer::Relu);
        blocks.push(Layer::Dense(Dense::new(
            rand_tensor(rng, &[3, 12]),
            rand_tensor(rng, &[3]),
        )));
        Network::new(blocks, vec![6], 3).unwrap()
    }

    fn stats_at(net: &Network, x: &Tensor, at: usize) -> (Vec<f64>, Vec<f64>) {
        let t = forward_trace(net, x, &[crate::nn::BlockRef::top(at)], false).unwrap();
        (t.sites[0].mean.clone(), t.sites[0].var.clone())
    }

    #[test]
    fn identity_fold_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for bn in [false, true] {
            let net = bn_recalibrate(&mlp(&mut rng, bn), &[rand_tensor(&mut rng, &[256, 6])]).unwrap();
            let x = rand_tensor(&mut rng, &[256, 6]);
            let calib = bn_recalibrate(&net, std::slice::from_ref(&x)).unwrap();
            let (folded, report) = fold_network(&calib, &FoldPlan::uniform(0.0, RepairMode::Data, 0)).unwrap();
            let repaired = data_repair(&calib, &folded, &report, std::slice::from_ref(&x)).unwrap();
            let diff = forward(&repaired, &x)
                .unwrap()
                .max_abs_diff(&forward(&calib, &x).unwrap());
            assert!(diff < 1e-9, "bn={bn}: {diff}");
        }
    }

    #[test]
    fn bn_free_affine_matches_cluster_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = mlp(&mut rng, false);
        let x = rand_tensor(&mut rng, &[512, 6]);
        let (folded, report) = fold_network(&net, &FoldPlan::uniform(0.5, RepairMode::Data, 3)).unwrap();
        let repaired = data_repair(&net, &folded, &report, std::slice::from_ref(&x)).unwrap();
        let a = Assignment::new(report.groups[0].labels.clone(), report.groups[0].k).unwrap();
        let (m0, v0) = stats_at(&net, &x, 0);
        let (m1, v1) = stats_at(&repaired, &x, 0);
        let mu_t = a.mean_of(&m0);
        let sd_t = a.mean_of(&v0.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
        for c in 0..a.k() {
            assert!((m1[c] - mu_t[c]).abs() < 1e-9);
            assert!((v1[c].sqrt() - sd_t[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_bn_variance_ratio_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = mlp(&mut rng, true);
        let x = rand_tensor(&mut rng, &[512, 6]);
        let net = bn_recalibrate(&net, std::slice::from_ref(&x)).unwrap();
        let (folded, report) = fold_network(&net, &FoldPlan::uniform(0.5, RepairMode::Data, 4)).unwrap();
        let repaired = data_repair(&net, &folded, &report, std::slice::from_ref(&x)).unwrap();
        let Some(Layer::BatchNorm(bn)) = repaired.block(crate::nn::BlockRef::top(1)) else {
            panic!()
        };
        let (_, v) = stats_at(&repaired, &x, 1);
        for (c, var) in v.iter().enumerate() {
            let g = bn.gamma.data()[c];
            assert!((var / (g * g) - 1.0).abs() < 0.05, "channel {c}: {}", var / (g * g));
        }
    }

    #[test]
    fn empty_calibration_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = mlp(&mut rng, false);
        let (folded, report) = fold_network(&net, &FoldPlan::uniform(0.5, RepairMode::Data, 0)).unwrap();
        assert!(matches!(
            data_repair(&net, &folded, &report, &[]),
            Err(RepairError::EmptyCalibration)
        ));
    }
}
