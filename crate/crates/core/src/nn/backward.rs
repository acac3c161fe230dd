//! Explicit per-layer backward rules.
//!
//! Input gradients for synthesis objectives run against inference-mode
//! BatchNorm; the trainer uses the same rules with batch statistics and
//! collects parameter gradients.

use serde::{Deserialize, Serialize};

use super::forward::{
    add, avgpool_forward, bn_apply, channel_moments, conv_forward, dense_forward, flatten, relu, spatial, BnMode, Pass,
    VAR_FLOOR,
};
use super::{BlockRef, Layer, Network, NnError};
use crate::tensor::Tensor;

/// Weighted objective on the network's input batch.
///
/// `ce_weight * CE(logits, targets) + bn_weight * sum_l (|mu_l - m_l|^2 + |var_l - v_l|^2)`
/// `+ l2_weight * |x|^2 + tv_weight * TV(x)`, where `mu_l, var_l` are batch moments of the
/// input to BatchNorm `l`, `m_l, v_l` its running statistics, and `TV` sums squared
/// differences between neighbouring pixels (neighbouring features for flat inputs).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub targets: Option<Vec<usize>>,
    pub ce_weight: f64,
    pub bn_weight: f64,
    pub l2_weight: f64,
    pub tv_weight: f64,
}

/// Parameter gradients in [`Network::params`] order.
pub type ParamGrads = Vec<Tensor>;

enum Cache {
    Dense(Tensor),
    Conv(Tensor),
    Bn {
        input: Tensor,
        mean: Vec<f64>,
        var: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Tensor),
    AvgPool(Vec<usize>),
    Flatten(Vec<usize>),
    Residual {
        main: Vec<Cache>,
        shortcut: Vec<Cache>,
    },
}

/// Activations recorded during a forward pass for later backpropagation.
pub struct TrainPass {
    caches: Vec<Cache>,
    /// Batch statistics used by each BatchNorm (batch-statistics mode only).
    pub bn_stats: Vec<(BlockRef, Vec<f64>, Vec<f64>)>,
}

fn record_layer(layer: &Layer, at: BlockRef, x: &Tensor, pass: &mut Pass) -> (Tensor, Cache) {
    match layer {
        Layer::Dense(d) => (dense_forward(d, x), Cache::Dense(x.clone())),
        Layer::Conv2d(c) => (conv_forward(c, x), Cache::Conv(x.clone())),
        Layer::BatchNorm(bn) => {
            let (mean, var, batch_stats) = match pass.mode {
                BnMode::Inference => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec(), false),
                BnMode::BatchStats => {
                    let (m, mut v) = channel_moments(x);
                    for e in &mut v {
                        *e = e.max(VAR_FLOOR);
                    }
                    pass.bn_stats.push((at, m.clone(), v.clone()));
                    (m, v, true)
                }
            };
            let y = bn_apply(bn, x, &mean, &var);
            (
                y,
                Cache::Bn {
                    input: x.clone(),
                    mean,
                    var,
                    batch_stats,
                },
            )
        }
        Layer::Relu => (relu(x), Cache::Relu(x.clone())),
        Layer::AvgPool(p) => (avgpool_forward(p, x), Cache::AvgPool(x.shape().to_vec())),
        Layer::Flatten => (flatten(x), Cache::Flatten(x.shape().to_vec())),
        Layer::Residual(r) => {
            let mut main = x.clone();
            let mut mc = Vec::with_capacity(r.main.len());
            for (i, b) in r.main.iter().enumerate() {
                let (y, c) = record_layer(b, BlockRef::main(at.top, i), &main, pass);
                main = y;
                mc.push(c);
            }
            let mut short = x.clone();
            let mut sc = Vec::with_capacity(r.shortcut.len());
            for (i, b) in r.shortcut.iter().enumerate() {
                let (y, c) = record_layer(b, BlockRef::shortcut(at.top, i), &short, pass);
                short = y;
                sc.push(c);
            }
            (add(&main, &short), Cache::Residual { main: mc, shortcut: sc })
        }
    }
}

fn record(network: &Network, x: &Tensor, mode: BnMode) -> Result<(Tensor, TrainPass), NnError> {
    network.check_batch(x)?;
    let mut pass = Pass::new(mode, None);
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(network.blocks.len());
    for (i, b) in network.blocks.iter().enumerate() {
        let (y, c) = record_layer(b, BlockRef::top(i), &cur, &mut pass);
        cur = y;
        caches.push(c);
    }
    Ok((
        cur,
        TrainPass {
            caches,
            bn_stats: pass.bn_stats,
        },
    ))
}

impl TrainPass {
    /// Training-mode forward: BatchNorm normalizes with batch statistics.
    pub fn forward(network: &Network, x: &Tensor) -> Result<(Tensor, TrainPass), NnError> {
        record(network, x, BnMode::BatchStats)
    }

    /// Backpropagates `dy` (gradient w.r.t. logits), returning parameter gradients.
    pub fn backward(&self, network: &Network, dy: &Tensor) -> ParamGrads {
        let mut grads: Vec<Tensor> = network.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        backprop_seq(&network.blocks, &self.caches, dy.clone(), 0, 0.0, Some(&mut grads));
        grads
    }
}

fn backprop_seq(
    blocks: &[Layer],
    caches: &[Cache],
    mut dy: Tensor,
    offset: usize,
    bn_weight: f64,
    mut grads: Option<&mut Vec<Tensor>>,
) -> Tensor {
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut o = offset;
    for b in blocks {
        offsets.push(o);
        o += b.param_count();
    }
    for i in (0..blocks.len()).rev() {
        dy = backprop_layer(&blocks[i], &caches[i], &dy, offsets[i], bn_weight, grads.as_deref_mut());
    }
    dy
}

fn backprop_layer(
    layer: &Layer,
    cache: &Cache,
    dy: &Tensor,
    offset: usize,
    bn_weight: f64,
    grads: Option<&mut Vec<Tensor>>,
) -> Tensor {
    match (layer, cache) {
        (Layer::Dense(d), Cache::Dense(x)) => {
            let (out, inp) = (d.out_features(), d.in_features());
            let batch = x.batch();
            let w = d.weight.data();
            let mut dx = vec![0.0; batch * inp];
            for b in 0..batch {
                let dyr = dy.row(b);
                let dxr = &mut dx[b * inp..(b + 1) * inp];
                for o in 0..out {
                    let g = dyr[o];
                    if g == 0.0 {
                        continue;
                    }
                    for (dxi, wi) in dxr.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *dxi += g * wi;
                    }
                }
            }
            if let Some(grads) = grads {
                let (gw, gb) = split_pair(grads, offset);
                let gwd = gw.data_mut();
                let gbd = gb.data_mut();
                for b in 0..batch {
                    let dyr = dy.row(b);
                    let xr = x.row(b);
                    for o in 0..out {
                        let g = dyr[o];
                        gbd[o] += g;
                        if g == 0.0 {
                            continue;
                        }
                        for (gwi, xi) in gwd[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                            *gwi += g * xi;
                        }
                    }
                }
            }
            Tensor::from_parts(vec![batch, inp], dx)
        }
        (Layer::Conv2d(c), Cache::Conv(x)) => conv_backward(c, x, dy, offset, grads),
        (
            Layer::BatchNorm(bn),
            Cache::Bn {
                input,
                mean,
                var,
                batch_stats,
            },
        ) => {
            let (batch, ch) = (input.shape()[0], input.shape()[1]);
            let sp = spatial(input);
            let count = (batch * sp) as f64;
            let g = bn.gamma.data();
            let xd = input.data();
            let dyd = dy.data();
            let mut dx = vec![0.0; xd.len()];
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            for c in 0..ch {
                let inv = 1.0 / (var[c] + bn.eps).sqrt();
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for b in 0..batch {
                    let base = (b * ch + c) * sp;
                    for k in base..base + sp {
                        let xhat = (xd[k] - mean[c]) * inv;
                        sum_dy += dyd[k];
                        sum_dy_xhat += dyd[k] * xhat;
                    }
                }
                dgamma[c] = sum_dy_xhat;
                dbeta[c] = sum_dy;
                for b in 0..batch {
                    let base = (b * ch + c) * sp;
                    for k in base..base + sp {
                        dx[k] = if *batch_stats {
                            let xhat = (xd[k] - mean[c]) * inv;
                            g[c] * inv * (dyd[k] - sum_dy / count - xhat * sum_dy_xhat / count)
                        } else {
                            g[c] * inv * dyd[k]
                        };
                    }
                }
            }
            if bn_weight > 0.0 && !*batch_stats {
                // Gradient of the statistic-matching term w.r.t. this layer's input.
                let (bm, bv) = channel_moments(input);
                let rm = bn.running_mean.data();
                let rv = bn.running_var.data();
                for c in 0..ch {
                    let dmean = 2.0 * (bm[c] - rm[c]) / count;
                    let dvar = 4.0 * (bv[c] - rv[c]) / count;
                    for b in 0..batch {
                        let base = (b * ch + c) * sp;
                        for k in base..base + sp {
                            dx[k] += bn_weight * (dmean + dvar * (xd[k] - bm[c]));
                        }
                    }
                }
            }
            if let Some(grads) = grads {
                let (gg, gb) = split_pair(grads, offset);
                for c in 0..ch {
                    gg.data_mut()[c] += dgamma[c];
                    gb.data_mut()[c] += dbeta[c];
                }
            }
            Tensor::from_parts(input.shape().to_vec(), dx)
        }
        (Layer::Relu, Cache::Relu(x)) => Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(dy.data())
                .map(|(xi, g)| if *xi > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        (Layer::AvgPool(p), Cache::AvgPool(shape)) => {
            let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let k = p.kernel;
            let (oh, ow) = (h / k, w / k);
            let norm = 1.0 / (k * k) as f64;
            let dyd = dy.data();
            let mut dx = vec![0.0; batch * c * h * w];
            for bc in 0..batch * c {
                for r in 0..h {
                    for q in 0..w {
                        dx[bc * h * w + r * w + q] = dyd[bc * oh * ow + (r / k) * ow + q / k] * norm;
                    }
                }
            }
            Tensor::from_parts(shape.clone(), dx)
        }
        (Layer::Flatten, Cache::Flatten(shape)) => dy.clone().reshape(shape.clone()),
        (Layer::Residual(r), Cache::Residual { main, shortcut }) => {
            let mut grads = grads;
            let main_params: usize = r.main.iter().map(Layer::param_count).sum();
            let dmain = backprop_seq(&r.main, main, dy.clone(), offset, bn_weight, grads.as_deref_mut());
            let dshort = backprop_seq(
                &r.shortcut,
                shortcut,
                dy.clone(),
                offset + main_params,
                bn_weight,
                grads,
            );
            add(&dmain, &dshort)
        }
        _ => unreachable!("cache does not match layer"),
    }
}

fn split_pair(grads: &mut [Tensor], offset: usize) -> (&mut Tensor, &mut Tensor) {
    let (a, b) = grads[offset..offset + 2].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn conv_backward(
    c: &crate::nn::Conv2d,
    x: &Tensor,
    dy: &Tensor,
    offset: usize,
    grads: Option<&mut Vec<Tensor>>,
) -> Tensor {
    let (batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = c.out_channels();
    let (kh, kw) = c.kernel();
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let (s, p) = (c.stride as isize, c.padding as isize);
    let wt = c.weight.data();
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = grads.as_ref().map(|_| vec![0.0; wt.len()]);
    let mut db = vec![0.0; cout];
    for b in 0..batch {
        for co in 0..cout {
            let gplane = &dyd[((b * cout + co) * oh * ow)..((b * cout + co + 1) * oh * ow)];
            db[co] += gplane.iter().sum::<f64>();
            for ci in 0..cin {
                let xoff = (b * cin + ci) * h * w;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let widx = ((co * cin + ci) * kh + ki) * kw + kj;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for r in 0..oh {
                            let ih = r as isize * s + ki as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for q in 0..ow {
                                let iw = q as isize * s + kj as isize - p;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xi = xoff + ih as usize * w + iw as usize;
                                let g = gplane[r * ow + q];
                                dx[xi] += wv * g;
                                acc += xd[xi] * g;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let (Some(grads), Some(dw)) = (grads, dw) {
        let (gw, gb) = split_pair(grads, offset);
        for (g, v) in gw.data_mut().iter_mut().zip(dw) {
            *g += v;
        }
        for (g, v) in gb.data_mut().iter_mut().zip(db) {
            *g += v;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}

/// Softmax cross-entropy averaged over the batch, with its gradient w.r.t. logits.
pub(crate) fn cross_entropy(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = vec![0.0; batch * classes];
    let mut loss = 0.0;
    for b in 0..batch {
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[targets[b]];
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            grad[b * classes + c] = (p - if c == targets[b] { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, Tensor::from_parts(vec![batch, classes], grad))
}

fn tv_loss_grad(x: &Tensor) -> (f64, Vec<f64>) {
    let shape = x.shape();
    let d = x.data();
    let mut g = vec![0.0; d.len()];
    let mut loss = 0.0;
    let pair = |a: usize, b: usize, loss: &mut f64, g: &mut [f64]| {
        let diff = d[b] - d[a];
        *loss += diff * diff;
        g[b] += 2.0 * diff;
        g[a] -= 2.0 * diff;
    };
    if shape.len() == 4 {
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for r in 0..h {
                for q in 0..w {
                    let i = base + r * w + q;
                    if r + 1 < h {
                        pair(i, i + w, &mut loss, &mut g);
                    }
                    if q + 1 < w {
                        pair(i, i + 1, &mut loss, &mut g);
                    }
                }
            }
        }
    } else {
        let width = x.row_len();
        for b in 0..x.batch() {
            for j in 0..width.saturating_sub(1) {
                pair(b * width + j, b * width + j + 1, &mut loss, &mut g);
            }
        }
    }
    (loss, g)
}

fn bn_stat_loss(network: &Network, caches: &[Cache]) -> f64 {
    let refs = network.batch_norm_refs();
    let mut total = 0.0;
    let mut idx = 0;
    collect_bn_inputs(&network.blocks, caches, &mut |inp| {
        let Some(Layer::BatchNorm(bn)) = network.block(refs[idx]) else {
            unreachable!("batch_norm_refs lists BatchNorm blocks")
        };
        let (m, v) = channel_moments(inp);
        let (rm, rv) = (bn.running_mean.data(), bn.running_var.data());
        for c in 0..bn.channels() {
            total += (m[c] - rm[c]).powi(2) + (v[c] - rv[c]).powi(2);
        }
        idx += 1;
    });
    total
}

fn collect_bn_inputs(blocks: &[Layer], caches: &[Cache], f: &mut dyn FnMut(&Tensor)) {
    for (b, c) in blocks.iter().zip(caches) {
        match (b, c) {
            (Layer::BatchNorm(_), Cache::Bn { input, .. }) => f(input),
            (Layer::Residual(r), Cache::Residual { main, shortcut }) => {
                collect_bn_inputs(&r.main, main, f);
                collect_bn_inputs(&r.shortcut, shortcut, f);
            }
            _ => {}
        }
    }
}

fn check_spec(network: &Network, x: &Tensor, spec: &LossSpec) -> Result<(), NnError> {
    network.check_batch(x)?;
    if spec.bn_weight > 0.0 && !network.has_batch_norm() {
        return Err(NnError::NoBatchNorm);
    }
    if spec.ce_weight != 0.0 {
        let t = spec.targets.as_ref().map_or(0, Vec::len);
        if t != x.batch() {
            return Err(NnError::Targets {
                expected: x.batch(),
                actual: t,
            });
        }
    }
    Ok(())
}

/// Loss value and gradient w.r.t. the input batch. Network weights are not differentiated.
pub fn input_gradient(network: &Network, x: &Tensor, spec: &LossSpec) -> Result<(f64, Tensor), NnError> {
    check_spec(network, x, spec)?;
    let (logits, tape) = record(network, x, BnMode::Inference)?;
    let mut loss = 0.0;
    let dlogits = if spec.ce_weight != 0.0 {
        let targets = spec.targets.as_ref().expect("checked");
        let (ce, mut g) = cross_entropy(&logits, targets);
        loss += spec.ce_weight * ce;
        g.data_mut().iter_mut().for_each(|v| *v *= spec.ce_weight);
        g
    } else {
        Tensor::zeros(logits.shape())
    };
    if spec.bn_weight > 0.0 {
        loss += spec.bn_weight * bn_stat_loss(network, &tape.caches);
    }
    let mut dx = backprop_seq(&network.blocks, &tape.caches, dlogits, 0, spec.bn_weight, None);
    if spec.l2_weight != 0.0 {
        for (g, v) in dx.data_mut().iter_mut().zip(x.data()) {
            *g += 2.0 * spec.l2_weight * v;
        }
        loss += spec.l2_weight * x.data().iter().map(|v| v * v).sum::<f64>();
    }
    if spec.tv_weight != 0.0 {
        let (tv, tg) = tv_loss_grad(x);
        loss += spec.tv_weight * tv;
        for (g, t) in dx.data_mut().iter_mut().zip(tg) {
            *g += spec.tv_weight * t;
        }
    }
    Ok((loss, dx))
}

/// Evaluates the objective of [`input_gradient`] without differentiating.
pub fn loss_value(network: &Network, x: &Tensor, spec: &LossSpec) -> Result<f64, NnError> {
    check_spec(network, x, spec)?;
    let (logits, tape) = record(network, x, BnMode::Inference)?;
    let mut loss = 0.0;
    if spec.ce_weight != 0.0 {
        loss += spec.ce_weight * cross_entropy(&logits, spec.targets.as_ref().expect("checked")).0;
    }
    if spec.bn_weight > 0.0 {
        loss += spec.bn_weight * bn_stat_loss(network, &tape.caches);
    }
    if spec.l2_weight != 0.0 {
        loss += spec.l2_weight * x.data().iter().map(|v| v * v).sum::<f64>();
    }
    if spec.tv_weight != 0.0 {
        loss += spec.tv_weight * tv_loss_grad(x).0;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AvgPool, BatchNorm, Conv2d, Dense, Residual};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect(),
        )
        .unwrap()
    }

    fn bn(rng: &mut ChaCha8Rng, c: usize) -> Layer {
        Layer::BatchNorm(BatchNorm {
            gamma: Tensor::new(vec![c], (0..c).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap(),
            beta: randn(rng, &[c], 0.3),
            running_mean: randn(rng, &[c], 0.3),
            running_var: Tensor::new(vec![c], (0..c).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap(),
            eps: 1e-5,
        })
    }

    fn dense(rng: &mut ChaCha8Rng, o: usize, i: usize) -> Layer {
        Layer::Dense(Dense::new(randn(rng, &[o, i], 0.6), randn(rng, &[o], 0.2)))
    }

    fn conv_net(rng: &mut ChaCha8Rng) -> Network {
        let conv = Layer::Conv2d(Conv2d {
            weight: randn(rng, &[3, 2, 3, 3], 0.4),
            bias: randn(rng, &[3], 0.2),
            stride: 1,
            padding: 1,
        });
        Network::new(
            vec![
                conv,
                bn(rng, 3),
                Layer::Relu,
                Layer::AvgPool(AvgPool { kernel: 2 }),
                Layer::Flatten,
                dense(rng, 4, 12),
                Layer::Residual(Residual {
                    main: vec![dense(rng, 4, 4), bn(rng, 4), Layer::Relu, dense(rng, 4, 4)],
                    shortcut: vec![dense(rng, 4, 4)],
                }),
                Layer::Relu,
                dense(rng, 3, 4),
            ],
            vec![2, 4, 4],
            3,
        )
        .unwrap()
    }

    fn full_spec(batch: usize) -> LossSpec {
        LossSpec {
            targets: Some((0..batch).map(|i| i % 3).collect()),
            ce_weight: 1.0,
            bn_weight: 0.7,
            l2_weight: 0.05,
            tv_weight: 0.03,
        }
    }

    #[test]
    fn half_squared_norm_through_identity_gives_x() {
        let net = Network::new(
            vec![Layer::Dense(Dense::new(
                Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(&[2]),
            ))],
            vec![2],
            2,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        let spec = LossSpec {
            l2_weight: 0.5,
            ..Default::default()
        };
        let (loss, g) = input_gradient(&net, &x, &spec).unwrap();
        assert_eq!(g, x);
        assert!((loss - 0.5 * x.data().iter().map(|v| v * v).sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn tv_gradient_vanishes_on_constant_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = conv_net(&mut rng);
        let x = Tensor::filled(&[2, 2, 4, 4], 0.7);
        let spec = LossSpec {
            tv_weight: 1.0,
            ..Default::default()
        };
        let (loss, g) = input_gradient(&net, &x, &spec).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bn_terms_require_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(vec![dense(&mut rng, 2, 2)], vec![2], 2).unwrap();
        let spec = LossSpec {
            bn_weight: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            input_gradient(&net, &Tensor::zeros(&[1, 2]), &spec),
            Err(NnError::NoBatchNorm)
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let h = 1e-4;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = conv_net(&mut rng);
            let x = randn(&mut rng, &[3, 2, 4, 4], 1.0);
            let spec = full_spec(3);
            let (loss, g) = input_gradient(&net, &x, &spec).unwrap();
            assert!((loss - loss_value(&net, &x, &spec).unwrap()).abs() < 1e-12);
            for i in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss_value(&net, &xp, &spec).unwrap() - loss_value(&net, &xm, &spec).unwrap()) / (2.0 * h);
                let an = g.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                    "seed {seed} index {i}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = conv_net(&mut rng);
        let x = randn(&mut rng, &[4, 2, 4, 4], 1.0);
        let targets: Vec<usize> = vec![0, 1, 2, 1];
        let loss = |n: &Network| {
            let (logits, _) = TrainPass::forward(n, &x).unwrap();
            cross_entropy(&logits, &targets).0
        };
        let (logits, tape) = TrainPass::forward(&net, &x).unwrap();
        let grads = tape.backward(&net, &cross_entropy(&logits, &targets).1);
        let count = net.params().len();
        assert_eq!(grads.len(), count);
        for p in 0..count {
            for i in (0..grads[p].len()).step_by(5) {
                let mut np = net.clone();
                np.params_mut()[p].data_mut()[i] += h;
                let mut nm = net.clone();
                nm.params_mut()[p].data_mut()[i] -= h;
                let fd = (loss(&np) - loss(&nm)) / (2.0 * h);
                let an = grads[p].data()[i];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                    "param {p} index {i}: fd {fd} analytic {an}"
                );
            }
        }
    }
}
