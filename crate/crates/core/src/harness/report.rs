use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{probe_sites, Method, SweepRow};
use crate::clustering::{pearson_matrix, ClusterError};
use crate::nn::{forward_trace, BlockRef, Network, NnError};
use crate::tensor::{Matrix, Tensor};

type Metric = fn(&SweepRow) -> f64;

pub const HISTOGRAM_BINS: usize = 20;

/// Matched-correlation profile of one activation site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub site: BlockRef,
    /// Per channel, the Pearson correlation with its most correlated other channel.
    pub correlations: Vec<f64>,
    /// Counts over `HISTOGRAM_BINS` equal bins of `[−1, 1]` (1 falls in the last bin).
    pub histogram: Vec<usize>,
}

impl LayerCorrelation {
    pub fn median(&self) -> f64 {
        median(&self.correlations)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Activations as a `samples × channels` matrix (spatial positions count as samples).
fn channel_columns(t: &Tensor) -> Matrix {
    let (b, c) = (t.shape()[0], t.shape()[1]);
    let sp: usize = t.shape()[2..].iter().product();
    let mut m = Matrix::zeros(b * sp, c);
    for i in 0..b {
        for ch in 0..c {
            for p in 0..sp {
                m[(i * sp + p, ch)] = t.data()[(i * c + ch) * sp + p];
            }
        }
    }
    m
}

pub fn histogram(values: &[f64]) -> Vec<usize> {
    let mut bins = vec![0; HISTOGRAM_BINS];
    for &v in values {
        let idx = (((v + 1.0) / 2.0) * HISTOGRAM_BINS as f64).floor();
        bins[(idx.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    bins
}

/// For each post-activation site, pairs every channel with its best distinct partner.
pub fn layer_correlation_report(network: &Network, probe: &Tensor) -> Result<Vec<LayerCorrelation>, ReportError> {
    let sites = probe_sites(network);
    let trace = forward_trace(network, probe, &sites, true)?;
    trace
        .sites
        .iter()
        .map(|s| {
            let acts = channel_columns(s.raw.as_ref().expect("raw activations kept"));
            let corr = pearson_matrix(&acts, &acts)?;
            let n = acts.cols();
            let correlations: Vec<f64> = (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| corr[(i, j)])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .map(|c| if c.is_finite() { c } else { 0.0 })
                .collect();
            Ok(LayerCorrelation {
                site: s.site,
                histogram: histogram(&correlations),
                correlations,
            })
        })
        .collect()
}

/// Renders sweep rows as markdown tables (mean over seeds) of accuracy, last-layer
/// variance ratio and total cost, with sparsity across and method down.
pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut sparsities: Vec<f64> = rows.iter().map(|r| r.sparsity).collect();
    sparsities.sort_by(f64::total_cmp);
    sparsities.dedup();
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut cells: BTreeMap<(Method, u64), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.method, r.sparsity.to_bits())).or_default().push(r);
    }
    let metrics: [(&str, Metric); 3] = [
        ("accuracy", |r| r.accuracy),
        ("last-layer variance ratio", |r| r.var_ratio_last),
        ("total J", |r| r.total_j),
    ];
    let mut out = String::new();
    for (title, get) in metrics {
        let _ = writeln!(out, "### {title} (mean over seeds)\n");
        let _ = write!(out, "| method |");
        for s in &sparsities {
            let _ = write!(out, " {s} |");
        }
        let _ = write!(out, "\n|---|");
        out.push_str(&"---|".repeat(sparsities.len()));
        out.push('\n');
        for m in &methods {
            let _ = write!(out, "| {m} |");
            for s in &sparsities {
                match cells.get(&(*m, s.to_bits())) {
                    Some(rs) => {
                        let mean = rs.iter().map(|r| get(r)).sum::<f64>() / rs.len() as f64;
                        let _ = write!(out, " {mean:.4} |");
                    }
                    None => out.push_str(" – |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
