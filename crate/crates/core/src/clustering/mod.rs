//! Clustering and matching kernels.
//!
//! k-means is treated as the matrix factorization `X ≈ U M` with a binary
//! assignment matrix `U`; [`project`] applies `C = U (UᵀU)⁻¹ Uᵀ` without
//! forming it.

mod hungarian;
mod kmeans;
mod matching;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

pub use hungarian::hungarian;
pub use kmeans::{brute_force_kmeans, greedy_pair_clustering, kmeans, KMeansOptions, KMeansResult, BRUTE_FORCE_MAX_N};
pub use matching::{channel_match_correlation, pearson_matrix, ChannelMatch};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("cluster count {k} must lie in 1..={n}")]
    ClusterCount { k: usize, n: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("brute force is limited to {max} rows, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("cost matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("expected {expected} rows, got {actual}")]
    RowCount { expected: usize, actual: usize },
    #[error("labels must cover every cluster in 0..{k}; cluster {missing} is empty")]
    EmptyCluster { k: usize, missing: usize },
    #[error("label {label} out of range for {k} clusters")]
    LabelRange { label: usize, k: usize },
    #[error("at least two samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("not a permutation: {0:?}")]
    NotPermutation(Vec<usize>),
}

/// A surjective map from `n` items onto `k` clusters (the compact form of `U`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    k: usize,
    labels: Vec<usize>,
}

impl Assignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self, ClusterError> {
        if k == 0 || k > labels.len() {
            return Err(ClusterError::ClusterCount { k, n: labels.len() });
        }
        let mut seen = vec![false; k];
        for &l in &labels {
            if l >= k {
                return Err(ClusterError::LabelRange { label: l, k });
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ClusterError::EmptyCluster { k, missing });
        }
        Ok(Self { k, labels })
    }

    /// Every item in its own cluster.
    pub fn identity(n: usize) -> Self {
        Self {
            k: n,
            labels: (0..n).collect(),
        }
    }

    /// Relabels clusters in order of first appearance.
    pub fn canonical(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self { k: map.len(), labels }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Member indices of every cluster, each in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }

    pub fn is_identity(&self) -> bool {
        self.k == self.labels.len()
    }

    /// The dense `n×k` matrix `U`.
    pub fn matrix(&self) -> Matrix {
        let mut u = Matrix::zeros(self.n(), self.k);
        for (i, &l) in self.labels.iter().enumerate() {
            u[(i, l)] = 1.0;
        }
        u
    }

    /// Cluster means of a per-item vector: `(UᵀU)⁻¹Uᵀ v`.
    pub fn mean_of(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n());
        let mut out = vec![0.0; self.k];
        for (x, &l) in v.iter().zip(&self.labels) {
            out[l] += x;
        }
        for (o, s) in out.iter_mut().zip(self.sizes()) {
            *o /= s as f64;
        }
        out
    }

    /// Cluster sums of a per-item vector: `Uᵀ v`.
    pub fn sum_of(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n());
        let mut out = vec![0.0; self.k];
        for (x, &l) in v.iter().zip(&self.labels) {
            out[l] += x;
        }
        out
    }
}

/// Cluster prototypes `M = (UᵀU)⁻¹UᵀX`, one row per cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids(pub Matrix);

impl Centroids {
    pub fn of(assignment: &Assignment, x: &Matrix) -> Result<Self, ClusterError> {
        check_rows(assignment, x)?;
        let mut m = Matrix::zeros(assignment.k(), x.cols());
        for (i, &l) in assignment.labels().iter().enumerate() {
            for (d, v) in m.row_mut(l).iter_mut().zip(x.row(i)) {
                *d += v;
            }
        }
        for (c, s) in assignment.sizes().into_iter().enumerate() {
            for d in m.row_mut(c) {
                *d /= s as f64;
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

fn check_rows(assignment: &Assignment, x: &Matrix) -> Result<(), ClusterError> {
    if assignment.n() != x.rows() {
        return Err(ClusterError::RowCount {
            expected: assignment.n(),
            actual: x.rows(),
        });
    }
    Ok(())
}

/// A bijection on `0..n`; `map[i]` is the image of `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self, ClusterError> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || seen[m] {
                return Err(ClusterError::NotPermutation(map));
            }
            seen[m] = true;
        }
        Ok(Self(map))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        Permutation(inv)
    }
}

/// `C X`: every row replaced by the mean of its cluster.
pub fn project(assignment: &Assignment, x: &Matrix) -> Result<Matrix, ClusterError> {
    let m = Centroids::of(assignment, x)?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (i, &l) in assignment.labels().iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.0.row(l));
    }
    Ok(out)
}

/// Fold cost `J = ‖X − C X‖²_F`.
pub fn fold_cost(assignment: &Assignment, x: &Matrix) -> Result<f64, ClusterError> {
    Ok(x.sub(&project(assignment, x)?).frobenius_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_projection(a: &Assignment) -> Matrix {
        let u = a.matrix();
        let mut utu_inv = Matrix::zeros(a.k(), a.k());
        for (c, s) in a.sizes().into_iter().enumerate() {
            utu_inv[(c, c)] = 1.0 / s as f64;
        }
        u.matmul(&utu_inv).matmul(&u.transpose())
    }

    #[test]
    fn project_averages_clusters() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, -1.0]]);
        let a = Assignment::new(vec![0, 0, 1], 2).unwrap();
        let p = project(&a, &x).unwrap();
        assert_eq!(p, Matrix::from_rows(&[vec![2.0, 4.0], vec![2.0, 4.0], vec![5.0, -1.0]]));
        assert_eq!(project(&Assignment::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn assignment_rejects_empty_clusters() {
        assert_eq!(
            Assignment::new(vec![0, 2, 0], 3),
            Err(ClusterError::EmptyCluster { k: 3, missing: 1 })
        );
        assert!(matches!(
            Assignment::new(vec![0], 2),
            Err(ClusterError::ClusterCount { .. })
        ));
        assert_eq!(Assignment::canonical(&[4, 4, 1, 7]).labels(), &[0, 0, 1, 2]);
    }

    #[test]
    fn permutation_validates() {
        assert!(Permutation::new(vec![1, 1]).is_err());
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse().as_slice(), &[1, 2, 0]);
    }

    fn instance() -> impl Strategy<Value = (Vec<usize>, Matrix)> {
        (1usize..9, 1usize..5).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(0usize..n, n),
                proptest::collection::vec(-5.0f64..5.0, n * d),
            )
                .prop_map(move |(labels, data)| (labels, Matrix::new(n, d, data)))
        })
    }

    proptest! {
        #[test]
        fn project_matches_dense_c_and_is_idempotent((labels, x) in instance()) {
            let a = Assignment::canonical(&labels);
            let p = project(&a, &x).unwrap();
            let dense = dense_projection(&a).matmul(&x);
            prop_assert!(p.max_abs_diff(&dense) <= 1e-12);
            prop_assert!(project(&a, &p).unwrap().max_abs_diff(&p) <= 1e-12);
        }

        #[test]
        fn centroid_perturbation_never_helps((labels, x) in instance(), delta in -1.0f64..1.0) {
            prop_assume!(delta.abs() > 1e-6);
            let a = Assignment::canonical(&labels);
            let m = Centroids::of(&a, &x).unwrap();
            let cost = |m: &Matrix| -> f64 {
                a.labels().iter().enumerate().map(|(i, &l)| crate::tensor::sq_dist(x.row(i), m.row(l))).sum()
            };
            let mut moved = m.0.clone();
            moved[(0, 0)] += delta;
            prop_assert!(cost(&moved) > cost(&m.0));
        }
    }
}
