use super::{AvgPool, BatchNorm, BlockRef, Conv2d, Dense, Layer, Network, NnError};
use crate::tensor::Tensor;

/// Lower bound applied to variances estimated from data.
pub const VAR_FLOOR: f64 = 1e-8;

/// How BatchNorm layers pick the statistics they normalize with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BnMode {
    /// Stored running statistics.
    Inference,
    /// Biased moments of the current batch, floored at `VAR_FLOOR`.
    BatchStats,
}

pub(crate) type Observer<'a> = &'a mut dyn FnMut(BlockRef, &Tensor);

pub(crate) struct Pass<'a> {
    pub mode: BnMode,
    pub observer: Option<Observer<'a>>,
    /// Batch statistics of every BatchNorm input, in forward order (BatchStats mode only).
    pub bn_stats: Vec<(BlockRef, Vec<f64>, Vec<f64>)>,
}

impl<'a> Pass<'a> {
    pub fn new(mode: BnMode, observer: Option<Observer<'a>>) -> Self {
        Self {
            mode,
            observer,
            bn_stats: Vec::new(),
        }
    }

    fn observe(&mut self, at: BlockRef, t: &Tensor) {
        if let Some(obs) = self.observer.as_mut() {
            obs(at, t);
        }
    }
}

pub(crate) fn dense_forward(d: &Dense, x: &Tensor) -> Tensor {
    let (out, inp) = (d.out_features(), d.in_features());
    let batch = x.batch();
    let w = d.weight.data();
    let bias = d.bias.data();
    let mut y = vec![0.0; batch * out];
    for b in 0..batch {
        let xr = x.row(b);
        let yr = &mut y[b * out..(b + 1) * out];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            let mut acc = 0.0;
            for (wi, xi) in wr.iter().zip(xr) {
                acc += wi * xi;
            }
            yr[o] = acc + bias[o];
        }
    }
    Tensor::from_parts(vec![batch, out], y)
}

pub(crate) fn conv_forward(c: &Conv2d, x: &Tensor) -> Tensor {
    let (batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = c.out_channels();
    let (kh, kw) = c.kernel();
    let (oh, ow) = c.output_hw(h, w).expect("validated conv shape");
    let (s, p) = (c.stride as isize, c.padding as isize);
    let wt = c.weight.data();
    let xd = x.data();
    let mut y = vec![0.0; batch * cout * oh * ow];
    for b in 0..batch {
        for co in 0..cout {
            let plane = &mut y[((b * cout + co) * oh * ow)..((b * cout + co + 1) * oh * ow)];
            plane.fill(c.bias.data()[co]);
            for ci in 0..cin {
                let xplane = &xd[((b * cin + ci) * h * w)..((b * cin + ci + 1) * h * w)];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wt[((co * cin + ci) * kh + ki) * kw + kj];
                        for r in 0..oh {
                            let ih = r as isize * s + ki as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[ih as usize * w..(ih as usize + 1) * w];
                            let yrow = &mut plane[r * ow..(r + 1) * ow];
                            for (q, yv) in yrow.iter_mut().enumerate() {
                                let iw = q as isize * s + kj as isize - p;
                                if iw >= 0 && iw < w as isize {
                                    *yv += wv * xrow[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![batch, cout, oh, ow], y)
}

/// Number of positions per channel in a `[B, c]` or `[B, c, h, w]` activation.
pub(crate) fn spatial(x: &Tensor) -> usize {
    x.shape()[2..].iter().product()
}

/// Per-channel biased mean and variance over batch and spatial positions (two-pass).
pub(crate) fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (batch, c) = (x.shape()[0], x.shape()[1]);
    let sp = spatial(x);
    let count = (batch * sp) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            mean[ch] += d[base..base + sp].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; c];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            var[ch] += d[base..base + sp]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count;
    }
    (mean, var)
}

/// Applies `y = gamma * (x - mean) / sqrt(var + eps) + beta` per channel.
pub(crate) fn bn_apply(bn: &BatchNorm, x: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
    let (batch, c) = (x.shape()[0], x.shape()[1]);
    let sp = spatial(x);
    let mut y = x.data().to_vec();
    let g = bn.gamma.data();
    let be = bn.beta.data();
    for b in 0..batch {
        for ch in 0..c {
            let scale = g[ch] / (var[ch] + bn.eps).sqrt();
            let shift = be[ch] - mean[ch] * scale;
            let base = (b * c + ch) * sp;
            for v in &mut y[base..base + sp] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

pub(crate) fn bn_forward(bn: &BatchNorm, at: BlockRef, x: &Tensor, pass: &mut Pass) -> Tensor {
    match pass.mode {
        BnMode::Inference => bn_apply(bn, x, bn.running_mean.data(), bn.running_var.data()),
        BnMode::BatchStats => {
            let (mean, mut var) = channel_moments(x);
            for v in &mut var {
                *v = v.max(VAR_FLOOR);
            }
            let y = bn_apply(bn, x, &mean, &var);
            pass.bn_stats.push((at, mean, var));
            y
        }
    }
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
}

pub(crate) fn avgpool_forward(p: &AvgPool, x: &Tensor) -> Tensor {
    let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = p.kernel;
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut y = vec![0.0; batch * c * oh * ow];
    for bc in 0..batch * c {
        for r in 0..oh {
            for q in 0..ow {
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        acc += xd[bc * h * w + (r * k + i) * w + q * k + j];
                    }
                }
                y[bc * oh * ow + r * ow + q] = acc * norm;
            }
        }
    }
    Tensor::from_parts(vec![batch, c, oh, ow], y)
}

pub(crate) fn flatten(x: &Tensor) -> Tensor {
    let batch = x.batch();
    let w = x.row_len();
    x.clone().reshape(vec![batch, w])
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

pub(crate) fn layer_forward(layer: &Layer, at: BlockRef, x: &Tensor, pass: &mut Pass) -> Tensor {
    let y = match layer {
        Layer::Dense(d) => dense_forward(d, x),
        Layer::Conv2d(c) => conv_forward(c, x),
        Layer::BatchNorm(bn) => bn_forward(bn, at, x, pass),
        Layer::Relu => relu(x),
        Layer::AvgPool(p) => avgpool_forward(p, x),
        Layer::Flatten => flatten(x),
        Layer::Residual(r) => {
            let mut main = x.clone();
            for (i, b) in r.main.iter().enumerate() {
                main = layer_forward(b, BlockRef::main(at.top, i), &main, pass);
            }
            let mut short = x.clone();
            for (i, b) in r.shortcut.iter().enumerate() {
                short = layer_forward(b, BlockRef::shortcut(at.top, i), &short, pass);
            }
            add(&main, &short)
        }
    };
    pass.observe(at, &y);
    y
}

pub(crate) fn run(network: &Network, batch: &Tensor, pass: &mut Pass) -> Result<Tensor, NnError> {
    network.check_batch(batch)?;
    let mut x = batch.clone();
    for (i, b) in network.blocks.iter().enumerate() {
        x = layer_forward(b, BlockRef::top(i), &x, pass);
    }
    Ok(x)
}

/// Inference-mode forward pass returning `[batch, class_count]` logits.
pub fn forward(network: &Network, batch: &Tensor) -> Result<Tensor, NnError> {
    run(network, batch, &mut Pass::new(BnMode::Inference, None))
}

/// Inference forward pass that reports every block output to `observer`.
pub fn forward_with_observer(
    network: &Network,
    batch: &Tensor,
    observer: &mut dyn FnMut(BlockRef, &Tensor),
) -> Result<Tensor, NnError> {
    run(network, batch, &mut Pass::new(BnMode::Inference, Some(observer)))
}

/// Per-channel statistics of one traced block output.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub site: BlockRef,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub raw: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub sites: Vec<ChannelStats>,
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn site(&self, at: BlockRef) -> Option<&ChannelStats> {
        self.sites.iter().find(|s| s.site == at)
    }
}

/// Runs inference and records per-channel moments at the requested block outputs.
pub fn forward_trace(
    network: &Network,
    batch: &Tensor,
    sites: &[BlockRef],
    keep_raw: bool,
) -> Result<ForwardTrace, NnError> {
    let known = network.block_refs();
    if let Some(bad) = sites.iter().find(|s| !known.contains(s)) {
        return Err(NnError::UnknownSite(*bad));
    }
    let mut found: Vec<Option<ChannelStats>> = vec![None; sites.len()];
    let mut observer = |at: BlockRef, t: &Tensor| {
        for (slot, s) in found.iter_mut().zip(sites) {
            if *s == at {
                let (mean, var) = channel_moments(t);
                *slot = Some(ChannelStats {
                    site: at,
                    mean,
                    var,
                    raw: keep_raw.then(|| t.clone()),
                });
            }
        }
    };
    let logits = forward_with_observer(network, batch, &mut observer)?;
    Ok(ForwardTrace {
        sites: found.into_iter().map(|s| s.expect("every site observed")).collect(),
        logits,
    })
}

/// Which side of the nonlinearity a trace site sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    #[default]
    PostActivation,
    PreActivation,
}

/// ReLU outputs (post) or the block outputs feeding each ReLU (pre), in forward order.
pub fn activation_sites(network: &Network, kind: SiteKind) -> Vec<BlockRef> {
    fn scan(seq: &[Layer], make: impl Fn(usize) -> BlockRef, kind: SiteKind, out: &mut Vec<BlockRef>) {
        for (i, b) in seq.iter().enumerate() {
            if !matches!(b, Layer::Relu) {
                continue;
            }
            match kind {
                SiteKind::PostActivation => out.push(make(i)),
                SiteKind::PreActivation if i > 0 => out.push(make(i - 1)),
                SiteKind::PreActivation => {}
            }
        }
    }
    let mut out = Vec::new();
    for (i, b) in network.blocks.iter().enumerate() {
        match b {
            Layer::Residual(r) => {
                scan(&r.main, |j| BlockRef::main(i, j), kind, &mut out);
                scan(&r.shortcut, |j| BlockRef::shortcut(i, j), kind, &mut out);
            }
            Layer::Relu => match kind {
                SiteKind::PostActivation => out.push(BlockRef::top(i)),
                SiteKind::PreActivation if i > 0 => out.push(BlockRef::top(i - 1)),
                SiteKind::PreActivation => {}
            },
            _ => {}
        }
    }
    out
}

/// Replaces each BatchNorm's running statistics with the empirical moments of its input
/// over all batches, front to back so later layers see recalibrated upstream layers.
pub fn bn_recalibrate(network: &Network, batches: &[Tensor]) -> Result<Network, NnError> {
    if batches.is_empty() {
        return Err(NnError::EmptyBatches);
    }
    for b in batches {
        network.check_batch(b)?;
    }
    let all = Tensor::concat_batches(batches);
    let mut pass = Pass::new(BnMode::BatchStats, None);
    run(network, &all, &mut pass)?;
    let mut out = network.clone();
    for (at, mean, var) in pass.bn_stats {
        if let Some(Layer::BatchNorm(bn)) = out.block_mut(at) {
            bn.running_mean = Tensor::from_parts(vec![mean.len()], mean);
            bn.running_var = Tensor::from_parts(vec![var.len()], var);
        }
    }
    Ok(out)
}
