use super::{ClusterError, Permutation};
use crate::tensor::Matrix;

/// Minimum-cost perfect matching of rows to columns (shortest augmenting paths, O(n³)).
///
/// Returns `π` with row `i` assigned to column `π(i)`.
pub fn hungarian(cost: &Matrix) -> Result<Permutation, ClusterError> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(ClusterError::NonSquare {
            rows: n,
            cols: cost.cols(),
        });
    }
    if !cost.is_finite() {
        return Err(ClusterError::NonFinite);
    }
    // Potentials u (rows) and v (columns); p[j] is the row matched to column j.
    // Index 0 is a sentinel, so rows and columns are 1-based here.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut map = vec![0; n];
    for j in 1..=n {
        map[p[j] - 1] = j - 1;
    }
    Permutation::new(map)
}
