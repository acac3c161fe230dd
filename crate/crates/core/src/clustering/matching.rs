use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::tensor::Matrix;

/// Greedy one-to-one channel pairing and the correlation of each matched pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatch {
    /// `pairing[i]` is the channel of `b` matched to channel `i` of `a`.
    pub pairing: Vec<usize>,
    /// Pearson correlation of each matched pair, indexed like `pairing`.
    pub correlations: Vec<f64>,
}

/// Pearson correlation between every column of `a` and every column of `b`.
///
/// A column with zero variance correlates 0 with everything.
pub fn pearson_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix, ClusterError> {
    if a.rows() != b.rows() {
        return Err(ClusterError::RowCount {
            expected: a.rows(),
            actual: b.rows(),
        });
    }
    if a.rows() < 2 {
        return Err(ClusterError::TooFewSamples(a.rows()));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(ClusterError::NonFinite);
    }
    let centred = |m: &Matrix| -> (Vec<Vec<f64>>, Vec<f64>) {
        let cols: Vec<Vec<f64>> = (0..m.cols())
            .map(|j| {
                let c = m.column(j);
                let mean = c.iter().sum::<f64>() / c.len() as f64;
                c.into_iter().map(|v| v - mean).collect()
            })
            .collect();
        let norms = cols
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        (cols, norms)
    };
    let (ca, na) = centred(a);
    let (cb, nb) = centred(b);
    let mut r = Matrix::zeros(a.cols(), b.cols());
    for i in 0..a.cols() {
        for j in 0..b.cols() {
            if na[i] > 0.0 && nb[j] > 0.0 {
                let dot: f64 = ca[i].iter().zip(&cb[j]).map(|(x, y)| x * y).sum();
                r[(i, j)] = (dot / (na[i] * nb[j])).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(r)
}

/// Pairs channels of `a` (samples×n) with channels of `b` greedily by descending
/// Pearson correlation, without replacement; ties go to the lowest `(i, j)`.
pub fn channel_match_correlation(a: &Matrix, b: &Matrix) -> Result<ChannelMatch, ClusterError> {
    if a.cols() != b.cols() {
        return Err(ClusterError::RowCount {
            expected: a.cols(),
            actual: b.cols(),
        });
    }
    let r = pearson_matrix(a, b)?;
    let n = a.cols();
    let mut candidates: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    // Stable sort keeps (i, j) order among equal correlations.
    candidates.sort_by(|&(i, j), &(p, q)| r[(p, q)].total_cmp(&r[(i, j)]));
    let mut pairing = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    let mut correlations = vec![0.0; n];
    for (i, j) in candidates {
        if pairing[i] == usize::MAX && !taken[j] {
            pairing[i] = j;
            taken[j] = true;
            correlations[i] = r[(i, j)];
        }
    }
    Ok(ChannelMatch { pairing, correlations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        )
    }

    fn negate(m: &Matrix) -> Matrix {
        Matrix::new(m.rows(), m.cols(), m.data().iter().map(|v| -v).collect())
    }

    #[test]
    fn self_match_is_identity() {
        let a = random(1, 50, 5);
        let m = channel_match_correlation(&a, &a).unwrap();
        assert_eq!(m.pairing, vec![0, 1, 2, 3, 4]);
        assert!(m.correlations.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn negated_channels_correlate_minus_one() {
        // With a single channel, or channels that are all perfectly correlated with each
        // other, every candidate pair against the negation has correlation -1.
        let a = random(2, 40, 1);
        let m = channel_match_correlation(&a, &negate(&a)).unwrap();
        assert!((m.correlations[0] + 1.0).abs() < 1e-12);
        let col = a.column(0);
        let twin = Matrix::new(40, 2, col.iter().flat_map(|v| [*v, 3.0 * v + 1.0]).collect());
        let m = channel_match_correlation(&twin, &negate(&twin)).unwrap();
        assert!(m.correlations.iter().all(|c| (c + 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_variance_channel_correlates_zero() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 5.0]]);
        let r = pearson_matrix(&a, &a).unwrap();
        assert_eq!(r[(0, 0)], 0.0);
        assert_eq!(r[(0, 1)], 0.0);
        assert!((r[(1, 1)] - 1.0).abs() < 1e-12);
        assert_eq!(
            pearson_matrix(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)),
            Err(ClusterError::TooFewSamples(1))
        );
    }

    /// Independent oracle: repeatedly scan all free pairs for the maximum.
    fn oracle(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let n = a.cols();
        let corr = |i: usize, j: usize| {
            let (x, y) = (a.column(i), b.column(j));
            let mx = x.iter().sum::<f64>() / x.len() as f64;
            let my = y.iter().sum::<f64>() / y.len() as f64;
            let sxy: f64 = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum();
            let sxx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
            sxy / (sxx * syy).sqrt()
        };
        let mut out = vec![0.0; n];
        let (mut free_a, mut free_b) = (vec![true; n], vec![true; n]);
        for _ in 0..n {
            let mut best = (0, 0, f64::NEG_INFINITY);
            for i in (0..n).filter(|&i| free_a[i]) {
                for j in (0..n).filter(|&j| free_b[j]) {
                    let c = corr(i, j);
                    if c > best.2 {
                        best = (i, j, c);
                    }
                }
            }
            free_a[best.0] = false;
            free_b[best.1] = false;
            out[best.0] = best.2;
        }
        out
    }

    #[test]
    fn greedy_trace_matches_oracle() {
        for seed in 0..20 {
            let a = random(seed, 100, 4);
            let b = random(seed + 1000, 100, 4);
            let m = channel_match_correlation(&a, &b).unwrap();
            for (x, y) in m.correlations.iter().zip(oracle(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
