//! Small dense linear-algebra helpers shared across the toolkit.
//!
//! Everything is 64-bit and deterministic: SVD factors are re-sorted by
//! singular value with a canonical sign convention, and all neighbor
//! computations break distance ties by the lower index.

use crate::error::{ForgeError, Result};
use nalgebra::{DMatrix, DVector};

/// SVD with singular values guaranteed non-increasing and a canonical sign
/// per singular pair (the largest-|entry| coordinate of each left vector is
/// made positive; ties fall to the lowest index).
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn sorted_svd(m: &DMatrix<f64>) -> Result<SortedSvd> {
    let max_niter = 100 * m.nrows().max(m.ncols()).max(8);
    let svd = nalgebra::linalg::SVD::try_new(m.clone(), true, true, f64::EPSILON, max_niter)
        .ok_or_else(|| {
            ForgeError::NumericalError(format!(
                "SVD did not converge within {max_niter} iterations"
            ))
        })?;
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let rank = s.len();
    let mut u_s = DMatrix::zeros(u.nrows(), rank);
    let mut v_s = DMatrix::zeros(v_t.ncols(), rank);
    let mut sv = Vec::with_capacity(rank);
    for (col, &idx) in order.iter().enumerate() {
        let mut ucol: Vec<f64> = u.column(idx).iter().copied().collect();
        let mut vcol: Vec<f64> = v_t.row(idx).iter().copied().collect();
        // canonical sign
        let mut pivot = 0usize;
        for (i, x) in ucol.iter().enumerate() {
            if x.abs() > ucol[pivot].abs() {
                pivot = i;
            }
        }
        if ucol[pivot] < 0.0 {
            for x in ucol.iter_mut() {
                *x = -*x;
            }
            for x in vcol.iter_mut() {
                *x = -*x;
            }
        }
        u_s.set_column(col, &DVector::from_vec(ucol));
        v_s.set_column(col, &DVector::from_vec(vcol));
        sv.push(s[idx]);
    }
    Ok(SortedSvd {
        u: u_s,
        singular_values: sv,
        v: v_s,
    })
}

/// Moore-Penrose pseudo-inverse via SVD, dropping singular values below
/// `1e-10 * sigma_max`.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = sorted_svd(m)?;
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = 1e-10 * smax;
    let mut pinv = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let vi = svd.v.column(i);
            let ui = svd.u.column(i);
            pinv += (vi * ui.transpose()) / s;
        }
    }
    Ok(pinv)
}

/// Euclidean distance between two rows of equal length.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Full pairwise Euclidean distance matrix over the rows of `x`.
pub fn pairwise_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = euclidean(
                x.row(i).transpose().as_slice(),
                x.row(j).transpose().as_slice(),
            );
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

/// Indices of the `k` nearest neighbors of row `i` given a distance matrix,
/// excluding `i` itself; ties broken by lower index.
pub fn knn_from_distances(d: &DMatrix<f64>, i: usize, k: usize) -> Vec<usize> {
    let n = d.nrows();
    let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    idx.sort_by(|&a, &b| d[(i, a)].total_cmp(&d[(i, b)]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Principal components of the rows of `x`: returns (mean, components) where
/// `components` has one unit column per retained axis, ordered by decreasing
/// explained variance, plus the full eigenvalue list.
pub struct Pca {
    pub mean: DVector<f64>,
    pub components: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

pub fn pca(x: &DMatrix<f64>, n_components: usize, weights: Option<&[f64]>) -> Result<Pca> {
    let n = x.nrows();
    let d = x.ncols();
    if n < 2 {
        return Err(ForgeError::InvalidArgument(
            "PCA needs at least two rows".into(),
        ));
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(ForgeError::ShapeError(format!(
                    "weight length {} != rows {}",
                    w.len(),
                    n
                )));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(ForgeError::InvalidArgument("non-positive weight sum".into()));
    }
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        mean += x.row(i).transpose() * w[i];
    }
    mean /= wsum;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = x.row(i).transpose() - &mean;
        cov += (&c * c.transpose()) * w[i];
    }
    cov /= wsum;
    // symmetric eigendecomposition; re-sort descending with canonical sign
    let eig = nalgebra::linalg::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let k = n_components.min(d);
    let mut comps = DMatrix::zeros(d, k);
    let mut evals = Vec::with_capacity(d);
    for &idx in &order {
        evals.push(eig.eigenvalues[idx].max(0.0));
    }
    for (col, &idx) in order.iter().take(k).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let mut pivot = 0usize;
        for (i, val) in v.iter().enumerate() {
            if val.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            for val in v.iter_mut() {
                *val = -*val;
            }
        }
        comps.set_column(col, &DVector::from_vec(v));
    }
    Ok(Pca {
        mean,
        components: comps,
        eigenvalues: evals,
    })
}

impl Pca {
    /// Project rows of `x` onto the retained components.
    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let centered = center_rows(x, &self.mean);
        &centered * &self.components
    }
}

pub fn center_rows(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= mean[j];
        }
    }
    out
}

/// Solve (A^T A + lambda I) w = A^T y  (ridge regression, no intercept).
pub fn ridge_solve(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let d = a.ncols();
    let mut gram = a.transpose() * a;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = a.transpose() * y;
    gram.clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.clone().lu().solve(&rhs))
        .ok_or_else(|| ForgeError::NumericalError("singular ridge system".into()))
}

/// Ordinary least squares via pseudo-inverse (rank-deficient designs allowed).
pub fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(pseudo_inverse(a)? * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::stream(seed, "linalg-test", 0);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn svd_reconstructs_and_sorts() {
        let m = random_matrix(8, 8, 1);
        let svd = sorted_svd(&m).unwrap();
        for w in svd.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let mut recon = DMatrix::zeros(8, 8);
        for i in 0..svd.singular_values.len() {
            recon += svd.u.column(i) * svd.singular_values[i] * svd.v.column(i).transpose();
        }
        assert!((recon - &m).norm() < 1e-9);
    }

    #[test]
    fn pseudo_inverse_of_wide_matrix() {
        let m = random_matrix(3, 6, 2);
        let pinv = pseudo_inverse(&m).unwrap();
        // m * pinv = I for full row rank
        let prod = &m * &pinv;
        assert!((prod - DMatrix::<f64>::identity(3, 3)).norm() < 1e-9);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = crate::rng::stream(3, "pca", 0);
        let n = 200;
        let mut x = DMatrix::zeros(n, 3);
        for i in 0..n {
            let t: f64 = rng.gen_range(-1.0..1.0);
            x[(i, 0)] = 3.0 * t;
            x[(i, 1)] = 0.1 * rng.gen_range(-1.0..1.0);
            x[(i, 2)] = 0.1 * rng.gen_range(-1.0..1.0);
        }
        let p = pca(&x, 1, None).unwrap();
        assert!(p.components[(0, 0)].abs() > 0.99);
    }

    #[test]
    fn knn_breaks_ties_by_index() {
        // three points equidistant from point 0
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
        let d = pairwise_distances(&x);
        let nn = knn_from_distances(&d, 0, 2);
        assert_eq!(nn, vec![1, 2]);
    }
}
