use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One-to-one matching of queries (rows) to targets (columns).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(query, target)` pairs sorted by target.
    pub pairs: Vec<(usize, usize)>,
    /// Queries left without a target, ascending.
    pub unmatched_queries: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Matrix) -> f64 {
        self.pairs.iter().fold(0.0, |s, &(q, t)| s + cost.get(q, t))
    }

    /// Target matched to each query, if any.
    pub fn target_of(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, t) in &self.pairs {
            out[q] = Some(t);
        }
        out
    }
}

/// Minimum-cost assignment covering every target.
///
/// Among optimal assignments the one whose per-target query sequence is
/// lexicographically smallest is returned, so results do not depend on
/// solver internals.
pub fn hungarian_match(cost: &Matrix) -> Result<Assignment> {
    let (nq, nt) = cost.shape();
    if !cost.is_finite() {
        return Err(Error::Contract("hungarian_match: cost has non-finite entries".into()));
    }
    if nq < nt {
        return Err(Error::Contract(format!(
            "hungarian_match: {nq} queries cannot cover {nt} targets"
        )));
    }
    let queries: Vec<usize> = (0..nq).collect();
    let targets: Vec<usize> = (0..nt).collect();
    let optimum = solve(cost, &queries, &targets);
    let tol = 1e-9 * (1.0 + optimum.abs());

    let mut used = vec![false; nq];
    let mut pairs = Vec::with_capacity(nt);
    let mut fixed_cost = 0.0;
    for t in 0..nt {
        let rest_targets: Vec<usize> = (t + 1..nt).collect();
        let mut chosen = None;
        for q in 0..nq {
            if used[q] {
                continue;
            }
            let rest_queries: Vec<usize> = (0..nq).filter(|&i| !used[i] && i != q).collect();
            let total = fixed_cost + cost.get(q, t) + solve(cost, &rest_queries, &rest_targets);
            if total <= optimum + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("an optimal completion always exists");
        used[q] = true;
        fixed_cost += cost.get(q, t);
        pairs.push((q, t));
    }
    let unmatched_queries = (0..nq).filter(|&q| !used[q]).collect();
    Ok(Assignment {
        pairs,
        unmatched_queries,
    })
}

/// Optimal cost of assigning `targets` to distinct `queries` (shortest
/// augmenting paths with potentials, targets as rows).
fn solve(cost: &Matrix, queries: &[usize], targets: &[usize]) -> f64 {
    let n = targets.len();
    let m = queries.len();
    if n == 0 {
        return 0.0;
    }
    let c = |i: usize, j: usize| cost.get(queries[j - 1], targets[i - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    // owner[j] = row (1-based) currently holding column j.
    let mut owner = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| owner[j] != 0).fold(0.0, |s, j| s + c(owner[j], j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_diagonal() {
        let cost = Matrix::from_rows(&[[0.0, 9.0, 9.0], [9.0, 0.0, 9.0], [9.0, 9.0, 0.0]]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(a.unmatched_queries.is_empty());
    }

    #[test]
    fn two_by_two_example() {
        let cost = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&cost), 2.0);
    }

    #[test]
    fn extra_query_is_left_unmatched() {
        let cost = Matrix::from_rows(&[[1.0, 5.0], [4.0, 2.0], [3.0, 3.0]]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.unmatched_queries, vec![2]);
    }

    #[test]
    fn ties_resolve_to_lowest_indices() {
        let cost = Matrix::filled(4, 2, 1.0);
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.unmatched_queries, vec![2, 3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(hungarian_match(&Matrix::zeros(1, 2)).is_err());
        let mut c = Matrix::zeros(2, 2);
        c.set(0, 1, f64::INFINITY);
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn no_targets_leaves_every_query_unmatched() {
        let a = hungarian_match(&Matrix::zeros(3, 0)).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_queries, vec![0, 1, 2]);
    }
}
