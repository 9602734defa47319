//! Dense linear-algebra kernels for small symmetric problems.
//!
//! Everything here is plain row-major `f64` with fixed left-to-right reduction
//! order, so results are bit-reproducible for a given input. Sizes stay small
//! (representation width <= 128, projected dimension <= 32), which is why the
//! eigensolver is a cyclic Jacobi sweep rather than an imported LAPACK binding.

use thiserror::Error;

/// Eigenvalues below this are clamped before inverse square roots; protects
/// whitening against near-degenerate covariance (e.g. identical representations).
pub const EIGEN_FLOOR: f64 = 1e-9;

/// Symmetry tolerance on inputs to the symmetric kernels.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asymmetry:e}")]
    NonSymmetric { max_asymmetry: f64 },
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("matrix is not PSD: min eigenvalue {min_eigenvalue:e} below floor")]
    NotPsd { min_eigenvalue: f64 },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let row_out = i * other.cols;
                let row_b = k * other.cols;
                for j in 0..other.cols {
                    out.data[row_out + j] += a * other.data[row_b + j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            let row = self.row(i);
            for j in 0..self.cols {
                acc += row[j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }
}

/// Full spectrum of a symmetric matrix, eigenvalues sorted descending,
/// eigenvectors as orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomp {
    /// The eigenvector for the largest eigenvalue.
    pub fn top_eigenvector(&self) -> Vec<f64> {
        self.eigenvectors.column(0)
    }
}

fn check_symmetric_input(a: &Matrix) -> Result<(), NumericsError> {
    if a.rows != a.cols {
        return Err(NumericsError::DimensionMismatch {
            context: format!("expected square matrix, got {}x{}", a.rows, a.cols),
        });
    }
    if !a.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(NumericsError::NonSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi sweeps.
pub fn sym_eig(a: &Matrix) -> Result<EigenDecomp, NumericsError> {
    check_symmetric_input(a)?;
    let n = a.rows;
    if n == 0 {
        return Ok(EigenDecomp { eigenvalues: vec![], eigenvectors: Matrix::zeros(0, 0) });
    }

    // Work on an explicitly symmetrized copy.
    let mut m = a.clone();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m.get(r, c) + m.get(c, r));
            m.set(r, c, v);
            m.set(c, r, v);
        }
    }
    let mut v = Matrix::identity(n);

    let frob = m.frobenius_norm().max(f64::MIN_POSITIVE);
    let target = (1e-14 * frob).powi(2);
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for r in 0..n {
            for c in (r + 1)..n {
                off += 2.0 * m.get(r, c) * m.get(r, c);
            }
        }
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Rotation angle per Golub & Van Loan 8.4.
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors.set(r, new_c, v.get(r, old_c));
        }
    }
    Ok(EigenDecomp { eigenvalues, eigenvectors })
}

/// Orthonormal basis for the top-k right-singular subspace of a data matrix.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    /// d x k column-orthonormal matrix.
    pub basis: Matrix,
    /// Set when the data had fewer than k numerically nonzero singular values;
    /// the missing columns are padded with an orthonormal complement.
    pub rank_deficient: bool,
}

/// Top-k right-singular basis of `x` (n x d, centered by the caller), via the
/// Gram matrix x^T x. Pads with an orthonormal complement when x has rank < k.
pub fn top_k_svd(x: &Matrix, k: usize) -> Result<ProjectionBasis, NumericsError> {
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || k > n.min(d) {
        return Err(NumericsError::DimensionMismatch {
            context: format!("k = {k} must be in 1..=min(n={n}, d={d})"),
        });
    }
    if !x.is_finite() {
        return Err(NumericsError::NonFinite);
    }

    let mut gram = Matrix::zeros(d, d);
    for row_idx in 0..n {
        let row = x.row(row_idx);
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let base = i * d;
            for j in 0..d {
                gram.data[base + j] += xi * row[j];
            }
        }
    }
    // Round-off can leave the accumulated Gram matrix asymmetric at ~1e-13;
    // symmetrize before the strict symmetry check.
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (gram.get(i, j) + gram.get(j, i));
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }

    let eig = sym_eig(&gram)?;
    let lambda_max = eig.eigenvalues[0].max(0.0);
    let tol = lambda_max * 1e-12 * (d.max(n) as f64);
    let rank = eig.eigenvalues.iter().filter(|&&l| l > tol).count();

    let mut basis = Matrix::zeros(d, k);
    for c in 0..k {
        for r in 0..d {
            basis.set(r, c, eig.eigenvectors.get(r, c));
        }
    }
    Ok(ProjectionBasis { basis, rank_deficient: rank < k })
}

/// Inverse square root of a PSD matrix: R with R * s * R = I.
///
/// With `clamp` set, eigenvalues below [`EIGEN_FLOOR`] are lifted to the floor;
/// otherwise such an input is rejected as not PSD.
pub fn inv_sqrt_psd(s: &Matrix, clamp: bool) -> Result<Matrix, NumericsError> {
    let eig = sym_eig(s)?;
    let min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if !clamp && min < EIGEN_FLOOR {
        return Err(NumericsError::NotPsd { min_eigenvalue: min });
    }
    let inv_sqrt: Vec<f64> =
        eig.eigenvalues.iter().map(|&l| 1.0 / l.max(EIGEN_FLOOR).sqrt()).collect();
    Ok(reassemble(&eig.eigenvectors, &inv_sqrt))
}

/// Matrix exponential of a symmetric matrix via its eigendecomposition.
pub fn mat_exp_sym(a: &Matrix) -> Result<Matrix, NumericsError> {
    let eig = sym_eig(a)?;
    let exps: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.exp()).collect();
    Ok(reassemble(&eig.eigenvectors, &exps))
}

/// V * diag(vals) * V^T for column-orthonormal V.
fn reassemble(v: &Matrix, vals: &[f64]) -> Matrix {
    let n = v.rows();
    let mut out = Matrix::zeros(n, n);
    for (idx, &val) in vals.iter().enumerate() {
        if val == 0.0 {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|r| v.get(r, idx)).collect();
        for i in 0..n {
            let vi = val * col[i];
            let base = i * n;
            for j in 0..n {
                out.data[base + j] += vi * col[j];
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn random_psd(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        let mut psd = b.transpose().matmul(&b);
        for i in 0..n {
            psd.set(i, i, psd.get(i, i) + 1e-3);
        }
        psd
    }

    /// Independent oracle: classical Jacobi with largest-off-diagonal pivoting,
    /// eigenvalues only. Deliberately a different strategy from the cyclic
    /// sweep in the implementation.
    fn jacobi_pivot_eigenvalues(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let mut m = a.clone();
        for _ in 0..10_000 {
            let mut best = (0, 1);
            let mut best_abs = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    if m.get(p, q).abs() > best_abs {
                        best_abs = m.get(p, q).abs();
                        best = (p, q);
                    }
                }
            }
            if best_abs < 1e-13 {
                break;
            }
            let (p, q) = best;
            let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * m.get(p, q));
            let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            for i in 0..n {
                let mip = m.get(i, p);
                let miq = m.get(i, q);
                m.set(i, p, c * mip - s * miq);
                m.set(i, q, s * mip + c * miq);
            }
            for j in 0..n {
                let mpj = m.get(p, j);
                let mqj = m.get(q, j);
                m.set(p, j, c * mpj - s * mqj);
                m.set(q, j, s * mpj + c * mqj);
            }
        }
        let mut vals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
        vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
        vals
    }

    fn reconstruction_error(a: &Matrix, eig: &EigenDecomp) -> f64 {
        let recon = reassemble(&eig.eigenvectors, &eig.eigenvalues);
        let mut diff = 0.0;
        for i in 0..a.data().len() {
            let d = recon.data()[i] - a.data()[i];
            diff += d * d;
        }
        diff.sqrt() / a.frobenius_norm().max(1e-300)
    }

    fn orthonormality_error(v: &Matrix) -> f64 {
        let gram = v.transpose().matmul(v);
        let mut worst = 0.0f64;
        for i in 0..gram.rows() {
            for j in 0..gram.cols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - expect).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_eigenvalues_are_ones() {
        let eig = sym_eig(&Matrix::identity(3)).unwrap();
        for l in &eig.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
        assert!(orthonormality_error(&eig.eigenvectors) < 1e-12);
    }

    #[test]
    fn diagonal_matrix_is_sorted_and_axis_aligned() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        let eig = sym_eig(&a).unwrap();
        assert!((eig.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-12);
        // top eigenvector is +-e2
        let v = eig.top_eigenvector();
        assert!(v[1].abs() > 1.0 - 1e-12);
        assert!(v[0].abs() < 1e-12);
    }

    #[test]
    fn random_symmetric_matches_pivot_oracle() {
        let a = random_symmetric(5, 11);
        let eig = sym_eig(&a).unwrap();
        let oracle = jacobi_pivot_eigenvalues(&a);
        for (got, want) in eig.eigenvalues.iter().zip(oracle.iter()) {
            assert!((got - want).abs() < 1e-9, "eigenvalue {got} vs oracle {want}");
        }
        assert!(reconstruction_error(&a, &eig) < 1e-6);
        assert!(orthonormality_error(&eig.eigenvectors) < 1e-8);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let mut a = Matrix::identity(3);
        a.set(0, 1, 1e-3);
        assert!(matches!(sym_eig(&a), Err(NumericsError::NonSymmetric { .. })));
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut a = Matrix::identity(3);
        a.set(1, 1, f64::NAN);
        assert!(matches!(sym_eig(&a), Err(NumericsError::NonFinite)));
    }

    #[test]
    fn svd_rank_one_recovers_axis() {
        // All rows along e1.
        let x = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], vec![0.5, 0.0, 0.0]]);
        let p = top_k_svd(&x, 1).unwrap();
        assert!(p.basis.get(0, 0).abs() > 1.0 - 1e-10);
        assert!(!p.rank_deficient);
        let p2 = top_k_svd(&x, 2).unwrap();
        assert!(p2.rank_deficient);
        assert!(orthonormality_error(&p2.basis) < 1e-8);
    }

    #[test]
    fn svd_planted_direction_is_found() {
        // Two clusters separated along a planted unit vector u in 6 dims.
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut u = vec![0.0; d];
        for x in u.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let n = norm2(&u);
        for x in u.iter_mut() {
            *x /= n;
        }
        let mut rows = Vec::new();
        for i in 0..200 {
            let shift = if i % 2 == 0 { 4.0 } else { -4.0 };
            let row: Vec<f64> =
                (0..d).map(|j| shift * u[j] + 0.1 * rng.gen_range(-1.0..1.0f64)).collect();
            rows.push(row);
        }
        // center
        let mut mean = vec![0.0; d];
        for r in &rows {
            for j in 0..d {
                mean[j] += r[j];
            }
        }
        for m in mean.iter_mut() {
            *m /= rows.len() as f64;
        }
        for r in rows.iter_mut() {
            for j in 0..d {
                r[j] -= mean[j];
            }
        }
        let x = Matrix::from_rows(&rows);
        let p = top_k_svd(&x, 1).unwrap();
        let overlap = dot(&p.basis.column(0), &u).abs();
        assert!(overlap >= 0.99, "planted-direction overlap {overlap}");
    }

    #[test]
    fn svd_residual_variance_dominates_in_top_subspace() {
        // Isotropic Gaussian-ish sample: top-2 projection captures ~2/d of the
        // variance; check the projected variance ratio against the residual.
        let d = 4;
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push((0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect::<Vec<_>>());
        }
        let x = Matrix::from_rows(&rows);
        let p = top_k_svd(&x, 2).unwrap();
        // Independent oracle: total variance vs variance in the projected
        // subspace, computed directly from the data.
        let total: f64 = x.data().iter().map(|v| v * v).sum();
        let mut captured = 0.0;
        for r in 0..n {
            let row = x.row(r);
            for c in 0..2 {
                let proj = dot(row, &p.basis.column(c));
                captured += proj * proj;
            }
        }
        let ratio = captured / total;
        // For isotropic data the top-2/4 share is slightly above 0.5 due to
        // sampling fluctuation; it must never be below the uniform share.
        assert!(ratio >= 2.0 / d as f64, "captured ratio {ratio}");
        assert!(ratio < 0.65, "captured ratio suspiciously high: {ratio}");
    }

    #[test]
    fn inv_sqrt_diagonal_closed_form() {
        let s = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]);
        let r = inv_sqrt_psd(&s, true).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((r.get(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_identity_is_identity() {
        let r = inv_sqrt_psd(&Matrix::identity(4), true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inv_sqrt_self_consistency_random_psd() {
        let s = random_psd(4, 3);
        let r = inv_sqrt_psd(&s, true).unwrap();
        let should_be_identity = r.matmul(&s).matmul(&r);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (should_be_identity.get(i, j) - expect).abs() < 1e-6,
                    "R*S*R deviates at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn inv_sqrt_unclamped_rejects_degenerate() {
        let s = Matrix::zeros(3, 3);
        assert!(matches!(inv_sqrt_psd(&s, false), Err(NumericsError::NotPsd { .. })));
        assert!(inv_sqrt_psd(&s, true).is_ok());
    }

    #[test]
    fn mat_exp_zero_is_identity() {
        let e = mat_exp_sym(&Matrix::zeros(3, 3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((e.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mat_exp_diagonal_closed_form() {
        let a = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 0.0]]);
        let e = mat_exp_sym(&a).unwrap();
        assert!((e.get(0, 0) - 4.0f64.exp()).abs() < 1e-9);
        assert!((e.get(1, 1) - 1.0).abs() < 1e-12);
    }

    /// Taylor-series oracle for the matrix exponential (30 terms).
    fn taylor_exp(a: &Matrix, terms: usize) -> Matrix {
        let n = a.rows();
        let mut sum = Matrix::identity(n);
        let mut term = Matrix::identity(n);
        for j in 1..=terms {
            term = term.matmul(a).scaled(1.0 / j as f64);
            for i in 0..sum.data.len() {
                sum.data[i] += term.data[i];
            }
        }
        sum
    }

    #[test]
    fn mat_exp_matches_taylor_oracle() {
        let a = random_symmetric(3, 21).scaled(0.8);
        let got = mat_exp_sym(&a).unwrap();
        let want = taylor_exp(&a, 30);
        for i in 0..got.data.len() {
            assert!(
                (got.data[i] - want.data[i]).abs() < 1e-8,
                "exp mismatch at {i}: {} vs {}",
                got.data[i],
                want.data[i]
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_sym_eig_reconstructs(seed in 0u64..1000, n in 2usize..9) {
            let a = random_symmetric(n, seed);
            let eig = sym_eig(&a).unwrap();
            prop_assert!(reconstruction_error(&a, &eig) <= 1e-6);
            prop_assert!(orthonormality_error(&eig.eigenvectors) <= 1e-8);
            for w in eig.eigenvalues.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn prop_inv_sqrt_self_inverse(seed in 0u64..1000, n in 2usize..9) {
            let s = random_psd(n, seed);
            let r = inv_sqrt_psd(&s, true).unwrap();
            let eye = r.matmul(&s).matmul(&r);
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((eye.get(i, j) - expect).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn prop_exp_of_negation_is_inverse(seed in 0u64..1000, n in 2usize..7) {
            let a = random_symmetric(n, seed);
            let e = mat_exp_sym(&a).unwrap();
            let e_neg = mat_exp_sym(&a.scaled(-1.0)).unwrap();
            let eye = e.matmul(&e_neg);
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((eye.get(i, j) - expect).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn prop_top_k_svd_orthonormal(seed in 0u64..1000, n in 3usize..12, d in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0f64)).collect())
                .collect();
            let x = Matrix::from_rows(&rows);
            let k = 1 + seed as usize % d.min(n);
            let p = top_k_svd(&x, k).unwrap();
            prop_assert!(orthonormality_error(&p.basis) <= 1e-8);
        }
    }

    #[test]
    fn inv_sqrt_self_inverse_64x64() {
        let s = random_psd(64, 99);
        let r = inv_sqrt_psd(&s, true).unwrap();
        let eye = r.matmul(&s).matmul(&r);
        for i in 0..64 {
            for j in 0..64 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((eye.get(i, j) - expect).abs() < 1e-6);
            }
        }
    }
}
