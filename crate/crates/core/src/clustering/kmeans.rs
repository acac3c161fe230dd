use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fold_cost, Assignment, Centroids, ClusterError};
use crate::tensor::{sq_dist, Matrix};

pub const BRUTE_FORCE_MAX_N: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Lloyd stops once an iteration improves `J` by no more than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 300,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Assignment,
    pub centroids: Centroids,
    /// `‖X − U M‖²_F` of the returned assignment.
    pub cost: f64,
}

fn validate(x: &Matrix, k: usize) -> Result<(), ClusterError> {
    if k == 0 || k > x.rows() {
        return Err(ClusterError::ClusterCount { k, n: x.rows() });
    }
    if !x.is_finite() {
        return Err(ClusterError::NonFinite);
    }
    Ok(())
}

/// Nearest centroid, ties broken by the lowest cluster index.
fn nearest(row: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(row, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`; fall back to the last candidate.
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    Matrix::from_rows(&chosen.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(x: &Matrix, labels: &mut [usize], centers: &mut Matrix) {
    let k = centers.rows();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = (usize::MAX, -1.0);
        for (i, &l) in labels.iter().enumerate() {
            if sizes[l] < 2 {
                continue;
            }
            let d = sq_dist(x.row(i), centers.row(l));
            if d > far.1 {
                far = (i, d);
            }
        }
        labels[far.0] = empty;
        centers.row_mut(empty).copy_from_slice(x.row(far.0));
    }
}

fn means(x: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(k, x.cols());
    let mut sizes = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        sizes[l] += 1;
        for (d, v) in m.row_mut(l).iter_mut().zip(x.row(i)) {
            *d += v;
        }
    }
    for (c, s) in sizes.into_iter().enumerate() {
        for d in m.row_mut(c) {
            *d /= s as f64;
        }
    }
    m
}

fn lloyd(x: &Matrix, k: usize, rng: &mut ChaCha8Rng, opts: &KMeansOptions) -> Vec<usize> {
    let mut centers = plus_plus_seed(x, k, rng);
    let mut labels = vec![0; x.rows()];
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_iters {
        for (i, l) in labels.iter_mut().enumerate() {
            *l = nearest(x.row(i), &centers).0;
        }
        repair_empty(x, &mut labels, &mut centers);
        centers = means(x, &labels, k);
        let cost: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| sq_dist(x.row(i), centers.row(l)))
            .sum();
        debug_assert!(
            cost <= prev + 1e-9 * prev.abs().max(1.0),
            "Lloyd iteration increased J from {prev} to {cost}"
        );
        if prev - cost <= opts.tol {
            break;
        }
        prev = cost;
    }
    hartigan_refine(x, &mut labels, k);
    labels
}

/// Single-point moves that lower `J`, applied until none remains.
///
/// Moving `x` from cluster `a` to `b` changes `J` by
/// `n_b/(n_b+1)·‖x−m_b‖² − n_a/(n_a−1)·‖x−m_a‖²`; Lloyd fixed points can still admit
/// such moves, and each accepted move strictly decreases `J`.
fn hartigan_refine(x: &Matrix, labels: &mut [usize], k: usize) {
    let mut centers = means(x, labels, k);
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let mut moved = true;
    let mut sweeps = 0;
    while moved && sweeps < 100 {
        moved = false;
        sweeps += 1;
        for i in 0..x.rows() {
            let a = labels[i];
            if sizes[a] < 2 {
                continue;
            }
            let na = sizes[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(x.row(i), centers.row(a));
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = sizes[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(x.row(i), centers.row(b)) - remove;
                if delta < best.1 - 1e-12 * remove.max(1.0) {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let (na, nb) = (sizes[a] as f64, sizes[b] as f64);
            for (j, v) in x.row(i).iter().enumerate() {
                centers[(a, j)] = (centers[(a, j)] * na - v) / (na - 1.0);
                centers[(b, j)] = (centers[(b, j)] * nb + v) / (nb + 1.0);
            }
            sizes[a] -= 1;
            sizes[b] += 1;
            labels[i] = b;
            moved = true;
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding and a Hartigan refinement pass; keeps the
/// best of several restarts.
///
/// Restart `r` draws from stream `r` of a ChaCha generator keyed by `seed`, and the
/// winner is chosen by `(J, r)`, so running restarts in parallel never changes the result.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, opts: &KMeansOptions) -> Result<KMeansResult, ClusterError> {
    validate(x, k)?;
    let finish = |assignment: Assignment| -> Result<KMeansResult, ClusterError> {
        let centroids = Centroids::of(&assignment, x)?;
        let cost = fold_cost(&assignment, x)?;
        Ok(KMeansResult {
            assignment,
            centroids,
            cost,
        })
    };
    if k == x.rows() {
        return finish(Assignment::identity(k));
    }
    let runs: Vec<(f64, Assignment)> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let labels = lloyd(x, k, &mut rng, opts);
            let a = Assignment::canonical(&labels);
            let cost = fold_cost(&a, x).expect("rows match");
            (cost, a)
        })
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.0.total_cmp(&b.0).then(ia.cmp(ib)))
        .map(|(_, run)| run.1)
        .expect("at least one restart");
    finish(best)
}

/// Exhaustive minimum of `J` over every partition of the rows into exactly `k` blocks.
pub fn brute_force_kmeans(x: &Matrix, k: usize) -> Result<(Assignment, f64), ClusterError> {
    validate(x, k)?;
    let n = x.rows();
    if n > BRUTE_FORCE_MAX_N {
        return Err(ClusterError::TooLarge {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    // Enumerate restricted growth strings: labels[0] = 0, labels[i] <= 1 + max(labels[..i]).
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut labels = vec![0usize; n];
    fn visit(
        i: usize,
        used: usize,
        k: usize,
        labels: &mut Vec<usize>,
        x: &Matrix,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let n = labels.len();
        if used + (n - i) < k {
            return;
        }
        if i == n {
            let a = Assignment::canonical(labels);
            let cost = fold_cost(&a, x).expect("rows match");
            if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                *best = Some((cost, labels.clone()));
            }
            return;
        }
        for l in 0..(used + 1).min(k) {
            labels[i] = l;
            visit(i + 1, used.max(l + 1), k, labels, x, best);
        }
    }
    labels[0] = 0;
    visit(1, 1, k, &mut labels, x, &mut best);
    let (cost, labels) = best.expect("k <= n admits a partition");
    Ok((Assignment::new(labels, k)?, cost))
}

/// Agglomerative merging: repeatedly fuse the two clusters with the closest centroids.
///
/// Ties go to the lexicographically lowest pair of current cluster indices, where a
/// cluster's index is its smallest member.
pub fn greedy_pair_clustering(x: &Matrix, k: usize) -> Result<Assignment, ClusterError> {
    validate(x, k)?;
    let n = x.rows();
    let mut labels: Vec<usize> = (0..n).collect();
    let mut centers: Vec<Option<(Vec<f64>, usize)>> = (0..n).map(|i| Some((x.row(i).to_vec(), 1))).collect();
    for _ in k..n {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            let Some((ci, _)) = &centers[i] else { continue };
            for j in i + 1..n {
                let Some((cj, _)) = &centers[j] else { continue };
                let d = sq_dist(ci, cj);
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (i, j, _) = best;
        let (cj, sj) = centers[j].take().unwrap();
        let (ci, si) = centers[i].as_mut().unwrap();
        let total = (*si + sj) as f64;
        for (a, b) in ci.iter_mut().zip(&cj) {
            *a = (*a * *si as f64 + b * sj as f64) / total;
        }
        *si += sj;
        for l in labels.iter_mut() {
            if *l == j {
                *l = i;
            }
        }
    }
    Ok(Assignment::canonical(&labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[test]
    fn k_equals_n_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 5, 3);
        let r = kmeans(&x, 5, 0, &KMeansOptions::default()).unwrap();
        assert_eq!(r.cost, 0.0);
        assert!(r.assignment.is_identity());
    }

    #[test]
    fn duplicated_pairs_cluster_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_matrix(&mut rng, 4, 3);
        let rows: Vec<Vec<f64>> = (0..8).map(|i| base.row(i / 2).to_vec()).collect();
        let x = Matrix::from_rows(&rows);
        let r = kmeans(&x, 4, 11, &KMeansOptions::default()).unwrap();
        assert!(r.cost.abs() < 1e-12);
        for p in 0..4 {
            assert_eq!(r.assignment.labels()[2 * p], r.assignment.labels()[2 * p + 1]);
        }
    }

    #[test]
    fn matches_brute_force_on_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 6, 2);
        let r = kmeans(&x, 2, 1, &KMeansOptions::default()).unwrap();
        let (_, oracle) = brute_force_kmeans(&x, 2).unwrap();
        assert!((r.cost - oracle).abs() <= 1e-9, "{} vs {oracle}", r.cost);
    }

    #[test]
    fn rejects_bad_k_and_nan() {
        let x = Matrix::new(2, 1, vec![0.0, f64::NAN]);
        assert_eq!(
            kmeans(&x, 1, 0, &KMeansOptions::default()),
            Err(ClusterError::NonFinite)
        );
        let x = Matrix::new(2, 1, vec![0.0, 1.0]);
        assert!(matches!(
            kmeans(&x, 3, 0, &KMeansOptions::default()),
            Err(ClusterError::ClusterCount { .. })
        ));
        let big = Matrix::zeros(13, 1);
        assert!(matches!(
            brute_force_kmeans(&big, 2),
            Err(ClusterError::TooLarge { .. })
        ));
    }

    #[test]
    fn brute_force_recovers_separated_groups() {
        let x = Matrix::from_rows(&[vec![0.0, 0.1], vec![10.0, 10.0], vec![0.1, 0.0], vec![10.1, 9.9]]);
        let (a, _) = brute_force_kmeans(&x, 2).unwrap();
        assert_eq!(a.labels(), &[0, 1, 0, 1]);
        let (a1, j1) = brute_force_kmeans(&x, 1).unwrap();
        assert_eq!(a1.k(), 1);
        let mean: Vec<f64> = (0..2).map(|c| x.column(c).iter().sum::<f64>() / 4.0).collect();
        let total: f64 = (0..4).map(|i| sq_dist(x.row(i), &mean)).sum();
        assert!((j1 - total).abs() < 1e-12);
    }

    #[test]
    fn greedy_merges_duplicates_first() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![5.0, 5.0], vec![3.0, -2.0], vec![5.0, 5.0]]);
        let a = greedy_pair_clustering(&x, 3).unwrap();
        assert_eq!(a.labels(), &[0, 1, 2, 1]);
        assert!(greedy_pair_clustering(&x, 4).unwrap().is_identity());
    }

    #[test]
    fn greedy_never_beats_kmeans() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 8, 3);
            let k = 1 + (seed as usize % 5);
            let g = fold_cost(&greedy_pair_clustering(&x, k).unwrap(), &x).unwrap();
            let km = kmeans(&x, k, seed, &KMeansOptions::default()).unwrap().cost;
            assert!(g + 1e-9 >= km, "seed {seed}: greedy {g} < kmeans {km}");
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 30, 4);
        let a = kmeans(&x, 7, 42, &KMeansOptions::default()).unwrap();
        let b = kmeans(&x, 7, 42, &KMeansOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn kmeans_reports_its_own_cost_and_respects_oracle(
            seed in 0u64..1000, n in 1usize..8, d in 1usize..4, kraw in 1usize..4
        ) {
            let k = kraw.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, n, d);
            let r = kmeans(&x, k, seed, &KMeansOptions::default()).unwrap();
            prop_assert_eq!(r.assignment.k(), k);
            prop_assert!((r.cost - fold_cost(&r.assignment, &x).unwrap()).abs() <= 1e-9);
            let (_, oracle) = brute_force_kmeans(&x, k).unwrap();
            prop_assert!(r.cost >= oracle - 1e-9);
        }

        #[test]
        fn cost_is_monotone_in_k(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 7, 2);
            let costs: Vec<f64> = (1..=7).map(|k| brute_force_kmeans(&x, k).unwrap().1).collect();
            for w in costs.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
