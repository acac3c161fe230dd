//! Random network builders and reference transforms shared by the integration tests.

#![allow(dead_code)]

use foldkit::clustering::Assignment;
use foldkit::folding::{discover_groups, FoldableGroup};
use foldkit::nn::{AvgPool, BatchNorm, Conv2d, Dense, Layer, Network, Residual};
use foldkit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Layer {
    let scale = (2.0 / fan_in as f64).sqrt();
    Layer::Dense(Dense::new(
        randn(rng, &[fan_out, fan_in], scale),
        randn(rng, &[fan_out], 0.1),
    ))
}

pub fn conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Layer {
    let scale = (2.0 / (9 * c_in) as f64).sqrt();
    Layer::Conv2d(Conv2d {
        weight: randn(rng, &[c_out, c_in, 3, 3], scale),
        bias: randn(rng, &[c_out], 0.1),
        stride: 1,
        padding: 1,
    })
}

/// BatchNorm with non-trivial affine parameters and running statistics.
pub fn batch_norm(rng: &mut ChaCha8Rng, channels: usize) -> Layer {
    let positive = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        Tensor::new(
            vec![channels],
            (0..channels).map(|_| rng.random_range(lo..hi)).collect(),
        )
        .unwrap()
    };
    Layer::BatchNorm(BatchNorm {
        gamma: positive(rng, 0.5, 1.5),
        beta: randn(rng, &[channels], 0.2),
        running_mean: randn(rng, &[channels], 0.2),
        running_var: positive(rng, 0.5, 2.0),
        eps: 1e-5,
    })
}

/// The small-network families used by the oracle and gradient tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Mlp,
    MlpBn,
    ConvBn,
    ResidualIdentity,
    ResidualProjection,
    ConvResidual,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Mlp,
        Family::MlpBn,
        Family::ConvBn,
        Family::ResidualIdentity,
        Family::ResidualProjection,
        Family::ConvResidual,
    ];

    pub fn has_batch_norm(self) -> bool {
        self != Family::Mlp
    }
}

pub fn random_network(family: Family, seed: u64) -> Network {
    let mut r = rng(seed);
    let r = &mut r;
    let classes = 3;
    let w = r.random_range(3..7usize);
    let (blocks, input_shape) = match family {
        Family::Mlp | Family::MlpBn => {
            let bn = family == Family::MlpBn;
            let d = r.random_range(2..6usize);
            let w2 = r.random_range(3..7usize);
            let mut blocks = vec![dense(r, d, w)];
            if bn {
                blocks.push(batch_norm(r, w));
            }
            blocks.extend([Layer::Relu, dense(r, w, w2)]);
            if bn {
                blocks.push(batch_norm(r, w2));
            }
            blocks.extend([Layer::Relu, dense(r, w2, classes)]);
            (blocks, vec![d])
        }
        Family::ConvBn => {
            let c2 = r.random_range(2..5usize);
            let blocks = vec![
                conv(r, 2, w),
                batch_norm(r, w),
                Layer::Relu,
                conv(r, w, c2),
                batch_norm(r, c2),
                Layer::Relu,
                Layer::AvgPool(AvgPool { kernel: 2 }),
                Layer::Flatten,
                dense(r, c2 * 4, classes),
            ];
            (blocks, vec![2, 4, 4])
        }
        Family::ResidualIdentity | Family::ResidualProjection => {
            let d = r.random_range(2..6usize);
            let (out, shortcut) = if family == Family::ResidualIdentity {
                (w, Vec::new())
            } else {
                let out = r.random_range(3..7usize);
                (out, vec![dense(r, w, out), batch_norm(r, out)])
            };
            let h = r.random_range(3..7usize);
            let main = vec![
                dense(r, w, h),
                batch_norm(r, h),
                Layer::Relu,
                dense(r, h, out),
                batch_norm(r, out),
            ];
            let blocks = vec![
                dense(r, d, w),
                batch_norm(r, w),
                Layer::Relu,
                Layer::Residual(Residual { main, shortcut }),
                Layer::Relu,
                dense(r, out, classes),
            ];
            (blocks, vec![d])
        }
        Family::ConvResidual => {
            let h = r.random_range(2..5usize);
            let main = vec![
                conv(r, w, h),
                batch_norm(r, h),
                Layer::Relu,
                conv(r, h, w),
                batch_norm(r, w),
            ];
            let blocks = vec![
                conv(r, 1, w),
                batch_norm(r, w),
                Layer::Relu,
                Layer::Residual(Residual {
                    main,
                    shortcut: Vec::new(),
                }),
                Layer::Relu,
                Layer::AvgPool(AvgPool { kernel: 2 }),
                Layer::Flatten,
                dense(r, w * 4, classes),
            ];
            (blocks, vec![1, 4, 4])
        }
    };
    Network::new(blocks, input_shape, classes).unwrap()
}

pub fn random_batch(network: &Network, batch: usize, seed: u64) -> Tensor {
    let mut shape = vec![batch];
    shape.extend(&network.input_shape);
    randn(&mut rng(seed), &shape, 1.0)
}

/// Applies `f` along `axis` of `t`, where `f` maps the `n` values of one fibre to `m` values.
fn map_axis(t: &Tensor, axis: usize, m: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let shape = t.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * m * inner];
    let mut fibre = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for (c, v) in fibre.iter_mut().enumerate() {
                *v = t.data()[(o * n + c) * inner + i];
            }
            for (c, v) in f(&fibre).into_iter().enumerate() {
                out[(o * m + c) * inner + i] = v;
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = m;
    Tensor::new(new_shape, out).unwrap()
}

/// Rewrites one group's channel axis: `produce` maps producer rows, BatchNorm entries and
/// biases; `consume` maps consumer input slices. Both take a fibre of `n` values to `m`.
pub fn transform_group(
    network: &mut Network,
    group: &FoldableGroup,
    m: usize,
    produce: &dyn Fn(&[f64]) -> Vec<f64>,
    consume: &dyn Fn(&[f64]) -> Vec<f64>,
) {
    let mut batch_norms = group.batch_norms.clone();
    for p in &group.producers {
        match network.block_mut(p.at).unwrap() {
            Layer::Dense(d) => {
                d.weight = map_axis(&d.weight, 0, m, produce);
                d.bias = map_axis(&d.bias, 0, m, produce);
            }
            Layer::Conv2d(c) => {
                c.weight = map_axis(&c.weight, 0, m, produce);
                c.bias = map_axis(&c.bias, 0, m, produce);
            }
            other => panic!("unexpected producer {}", other.kind_name()),
        }
        batch_norms.extend(p.batch_norm);
    }
    for at in batch_norms {
        let Layer::BatchNorm(bn) = network.block_mut(at).unwrap() else {
            panic!("expected BatchNorm at {at}");
        };
        for t in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
            *t = map_axis(t, 0, m, produce);
        }
    }
    for c in &group.consumers {
        match network.block_mut(c.at).unwrap() {
            Layer::Dense(d) => {
                let out = d.out_features();
                let w = d.weight.clone().reshape(vec![out, group.channels, c.spatial]);
                d.weight = map_axis(&w, 1, m, consume).reshape(vec![out, m * c.spatial]);
            }
            Layer::Conv2d(conv) => conv.weight = map_axis(&conv.weight, 1, m, consume),
            other => panic!("unexpected consumer {}", other.kind_name()),
        }
    }
}

/// Doubles every foldable channel: producers and BatchNorm entries are copied, consumer
/// slices are split in half between the two copies. The result computes the same function.
pub fn duplicate_channels(network: &Network) -> Network {
    let mut net = network.clone();
    let count = discover_groups(&net).unwrap().groups.len();
    for index in 0..count {
        let group = discover_groups(&net).unwrap().groups[index].clone();
        let n = group.channels;
        transform_group(
            &mut net,
            &group,
            2 * n,
            &|v| v.iter().flat_map(|&x| [x, x]).collect(),
            &|v| v.iter().flat_map(|&x| [0.5 * x, 0.5 * x]).collect(),
        );
    }
    net.validate().unwrap();
    net
}

/// Dense projection `C = U (UᵀU)⁻¹ Uᵀ` of an assignment.
pub fn dense_projection(a: &Assignment) -> Vec<Vec<f64>> {
    let sizes = a.sizes();
    let labels = a.labels();
    (0..a.n())
        .map(|i| {
            (0..a.n())
                .map(|j| {
                    if labels[i] == labels[j] {
                        1.0 / sizes[labels[i]] as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// The full-width compact form of a fold: every producer-side vector `v` becomes `C v`
/// and every consumer `W_{l+1}` becomes `W_{l+1} Cᵀ`.
pub fn compact_form(network: &Network, assignments: &[Assignment]) -> Network {
    let mut net = network.clone();
    let groups = discover_groups(network).unwrap().groups;
    for (group, a) in groups.iter().zip(assignments) {
        let c = dense_projection(a);
        let apply = |v: &[f64]| -> Vec<f64> {
            c.iter()
                .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
                .collect()
        };
        // C is symmetric, so Cᵀ acts on consumer slices exactly as C does.
        transform_group(&mut net, group, a.n(), &apply, &apply);
    }
    net
}

/// Permutes every foldable channel group: new channel `j` is old channel `perm[j]`.
pub fn permute_channels(network: &Network, perms: &[Vec<usize>]) -> Network {
    let mut net = network.clone();
    let groups = discover_groups(network).unwrap().groups;
    for (group, perm) in groups.iter().zip(perms) {
        let gather = |v: &[f64]| -> Vec<f64> { perm.iter().map(|&i| v[i]).collect() };
        transform_group(&mut net, group, perm.len(), &gather, &gather);
    }
    net
}
