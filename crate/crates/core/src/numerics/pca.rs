use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

/// Principal components of a row-sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Column means of the input.
    pub mean: Vec<f64>,
    /// Unit principal directions, one per row, sign-normalized.
    pub directions: Matrix,
    /// Directions scaled by `σᵢ / √(n−1)`, so row norms are the standard
    /// deviation of the data along each direction.
    pub components: Matrix,
    /// Singular values of the centered data, non-increasing.
    pub singular_values: Vec<f64>,
}

const MAX_SWEEPS: usize = 100;

/// Top-`k` principal components of `a` (rows are samples).
///
/// The centered matrix is diagonalized with one-sided Jacobi rotations, which
/// yields the right singular vectors without forming the covariance matrix.
pub fn pca(a: &Matrix, k: usize) -> Result<PcaResult> {
    let (n, d) = a.shape();
    if n < 2 {
        return Err(Error::Parameter(format!("pca needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Parameter(format!(
            "pca component count {k} outside 1..={}",
            n.min(d)
        )));
    }
    let mean = a.column_means();

    // Column-major working copy of the centered data.
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|c| (0..n).map(|r| a.get(r, c) - mean[c]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|c| (0..d).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigmas: Vec<f64> = cols.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    // Stable sort keeps lower index first among equal singular values.
    order.sort_by(|&i, &j| sigmas[j].total_cmp(&sigmas[i]));

    let scale = 1.0 / ((n - 1).max(1) as f64).sqrt();
    let mut directions = Matrix::zeros(k, d);
    let mut components = Matrix::zeros(k, d);
    let mut singular_values = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let mut dir = v[idx].clone();
        orient(&mut dir);
        let sigma = sigmas[idx];
        for (c, x) in dir.iter().enumerate() {
            directions.set(row, c, *x);
            components.set(row, c, x * sigma * scale);
        }
        singular_values.push(sigma);
    }
    Ok(PcaResult {
        mean,
        directions,
        components,
        singular_values,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Flips `dir` so its largest-magnitude entry (first on ties) is positive.
fn orient(dir: &mut [f64]) {
    let mut best = 0;
    for (i, x) in dir.iter().enumerate() {
        if x.abs() > dir[best].abs() {
            best = i;
        }
    }
    if dir[best] < 0.0 {
        dir.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross() -> Matrix {
        Matrix::from_rows(&[[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap()
    }

    #[test]
    fn axis_aligned_example() {
        let r = pca(&cross(), 2).unwrap();
        assert_eq!(r.directions, Matrix::identity(2));
        let norms = r.components.row_norms();
        assert!((norms[0] - 6f64.sqrt()).abs() < 1e-12);
        assert!((norms[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(r.singular_values[0] >= r.singular_values[1]);
    }

    #[test]
    fn identical_rows_have_zero_variance() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let r = pca(&a, 3).unwrap();
        assert!(r.singular_values.iter().all(|s| *s == 0.0));
        assert_eq!(r.components, Matrix::zeros(3, 3));
        assert_eq!(r.mean, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn orthogonal_direction_has_zero_singular_value() {
        // Every row lies on the x axis, so y carries no variance.
        let a = Matrix::from_rows(&[[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]]).unwrap();
        let r = pca(&a, 2).unwrap();
        assert_eq!(r.singular_values[1], 0.0);
        assert_eq!(r.directions.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_component_count() {
        assert!(matches!(pca(&cross(), 3), Err(Error::Parameter(_))));
        assert!(matches!(pca(&cross(), 0), Err(Error::Parameter(_))));
        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(pca(&one, 1), Err(Error::Parameter(_))));
    }
}
