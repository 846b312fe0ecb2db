//! Dense-matrix substrate: storage, SVD, norms and the evaluation metrics.
//!
//! Everything downstream works on [`Mat`], a row-major dense `f64` matrix.
//! The SVD backend is nalgebra; results are post-processed into a fixed sign
//! convention (largest-magnitude entry of each left singular vector made
//! nonnegative) so that repeated runs on identical input bits produce
//! identical factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{input_err, numeric_err, Result};

pub mod io;

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from a row-major buffer. Panics on length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return input_err("shape mismatch in add");
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return input_err("shape mismatch in sub");
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            input_err(format!("{ctx}: matrix contains non-finite entries"))
        }
    }

    /// Matrix product `self * other`, delegated to nalgebra's gemm.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return input_err("shape mismatch in matmul");
        }
        let a = self.to_dmatrix();
        let b = other.to_dmatrix();
        Ok(Mat::from_dmatrix(&(a * b)))
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// Thin SVD factors: `U` (p×k, orthonormal columns), descending singular
/// values, `V` (n×k, orthonormal columns).
#[derive(Debug, Clone)]
pub struct SvdTriplet {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

impl SvdTriplet {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Reconstruct `U * diag(sigma) * V^T`.
    pub fn reconstruct(&self) -> Mat {
        let p = self.u.rows();
        let n = self.v.rows();
        let mut out = Mat::zeros(p, n);
        for k in 0..self.sigma.len() {
            let s = self.sigma[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..p {
                let uik = self.u.get(i, k) * s;
                for j in 0..n {
                    out.data[i * n + j] += uik * self.v.get(j, k);
                }
            }
        }
        out
    }
}

/// Evaluation metrics attached to one denoised estimate.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub left_inner: f64,
    pub right_inner: f64,
}

/// Thin SVD of `m`, truncated to the top `k` triplets.
///
/// Singular values are sorted descending and each left singular vector is
/// sign-normalized so its largest-magnitude entry is nonnegative (the first
/// such entry on exact ties); the matching right vector is flipped with it.
pub fn svd(m: &Mat, k: usize) -> Result<SvdTriplet> {
    if k > m.rows().min(m.cols()) {
        return input_err("svd: k exceeds min(p, n)");
    }
    m.check_finite("svd")?;
    let svd = m.to_dmatrix().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let s: &DVector<f64> = &svd.singular_values;
    if !s.iter().all(|x| x.is_finite()) {
        return numeric_err("svd did not converge to finite singular values");
    }

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));

    let p = m.rows();
    let n = m.cols();
    let mut out_u = Mat::zeros(p, k.max(1));
    let mut out_v = Mat::zeros(n, k.max(1));
    let mut out_s = Vec::with_capacity(k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        out_s.push(s[idx]);
        // Sign convention: largest-|entry| of the left vector nonnegative.
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..p {
            let a = u[(i, idx)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        let flip = if u[(best, idx)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            out_u.set(i, col, flip * u[(i, idx)]);
        }
        for j in 0..n {
            out_v.set(j, col, flip * v_t[(idx, j)]);
        }
    }
    // k = 0 is legal (empty triplet); keep 1-column placeholders out of it.
    if k == 0 {
        return Ok(SvdTriplet { u: Mat::zeros(p, 1), sigma: vec![], v: Mat::zeros(n, 1) });
    }
    Ok(SvdTriplet { u: out_u, sigma: out_s, v: out_v })
}

/// Mean squared error `||a - b||_F^2 / (p n)`.
pub fn mse(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return input_err("mse: shape mismatch");
    }
    let pn = (a.rows() * a.cols()) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pn)
}

/// Projection norm `||U_true^T u_hat||_2` of a unit vector onto a subspace
/// spanned by orthonormal columns.
pub fn subspace_inner(u_true: &Mat, u_hat: &[f64]) -> Result<f64> {
    if u_true.rows() != u_hat.len() {
        return input_err("subspace_inner: dimension mismatch");
    }
    let norm: f64 = u_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return input_err(format!("subspace_inner: u_hat is not unit norm (|u| = {norm})"));
    }
    let r = u_true.cols();
    let mut acc = 0.0;
    for k in 0..r {
        let mut dot = 0.0;
        for i in 0..u_true.rows() {
            dot += u_true.get(i, k) * u_hat[i];
        }
        acc += dot * dot;
    }
    Ok(acc.sqrt())
}

/// Eigendecomposition of the Gram matrix of the smaller side of `m`.
///
/// Returns all eigenvalues of `m m^T` (if p <= n) or `m^T m` (if p > n) in
/// descending order along with the corresponding orthonormal eigenvectors.
/// This is the workhorse behind the spectral estimators: it is much cheaper
/// than a bidiagonal SVD of the full rectangle and directly yields the
/// quantities they need.
pub(crate) fn gram_eigen_small_side(m: &Mat) -> (Vec<f64>, DMatrix<f64>, bool) {
    let transposed = m.rows() > m.cols();
    let a = m.to_dmatrix();
    let gram = if transposed { a.transpose() * &a } else { &a * a.transpose() };
    let se = gram.symmetric_eigen();
    let k = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| se.eigenvalues[y].partial_cmp(&se.eigenvalues[x]).unwrap().then(x.cmp(&y)));
    let mut eigs = Vec::with_capacity(k);
    let mut vecs = DMatrix::zeros(k, k);
    for (col, &idx) in order.iter().enumerate() {
        eigs.push(se.eigenvalues[idx].max(0.0));
        for i in 0..k {
            vecs[(i, col)] = se.eigenvectors[(i, idx)];
        }
    }
    (eigs, vecs, transposed)
}

/// Top-`k` singular triplets of `m` recovered from the small-side Gram
/// eigendecomposition, with the same sign convention as [`svd`].
///
/// Accurate for triplets whose singular value is well above `sqrt(eps)`
/// relative to the largest; callers only use it for detected spikes.
pub(crate) fn gram_top_svd(m: &Mat, k: usize) -> SvdTriplet {
    let (eigs, vecs, transposed) = gram_eigen_small_side(m);
    let p = m.rows();
    let n = m.cols();
    let a = m.to_dmatrix();
    let k = k.min(eigs.len());
    let mut u = Mat::zeros(p, k.max(1));
    let mut v = Mat::zeros(n, k.max(1));
    let mut sigma = Vec::with_capacity(k);
    for col in 0..k {
        let s = eigs[col].sqrt();
        sigma.push(s);
        let w = vecs.column(col);
        // Small-side eigenvector is a left vector if !transposed, else right.
        let (uvec, vvec): (Vec<f64>, Vec<f64>) = if !transposed {
            let mut vv = vec![0.0; n];
            if s > 0.0 {
                for j in 0..n {
                    let mut dot = 0.0;
                    for i in 0..p {
                        dot += a[(i, j)] * w[i];
                    }
                    vv[j] = dot / s;
                }
            }
            (w.iter().copied().collect(), vv)
        } else {
            let mut uu = vec![0.0; p];
            if s > 0.0 {
                for i in 0..p {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += a[(i, j)] * w[j];
                    }
                    uu[i] = dot / s;
                }
            }
            (uu, w.iter().copied().collect())
        };
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, x) in uvec.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        let flip = if uvec[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            u.set(i, col, flip * uvec[i]);
        }
        for j in 0..n {
            v.set(j, col, flip * vvec[j]);
        }
    }
    SvdTriplet { u, sigma, v }
}

/// Rank-k accumulation `sum_i w_i * u_i v_i^T` into a p×n matrix.
pub(crate) fn outer_sum(u: &Mat, v: &Mat, weights: &[f64]) -> Mat {
    let p = u.rows();
    let n = v.rows();
    let mut out = Mat::zeros(p, n);
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for i in 0..p {
            let uw = u.get(i, k) * w;
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += uw * v.get(j, k);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use rand::Rng;

    fn random_mat(p: usize, n: usize, seed: u64) -> Mat {
        let mut rng = derive_rng(seed, "matcore-test", 0);
        Mat::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svd_identity_has_unit_singular_values() {
        let m = Mat::identity(3);
        let t = svd(&m, 3).unwrap();
        for s in &t.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_rank_one_outer_product() {
        // a = 2 * e, b = 3 * f with ||e|| = ||f|| = 1 gives sigma = (6, 0).
        let a = [2.0, 0.0, 0.0];
        let b = [0.0, 3.0, 0.0, 0.0];
        let m = Mat::from_fn(3, 4, |i, j| a[i] * b[j]);
        let t = svd(&m, 2).unwrap();
        assert!((t.sigma[0] - 6.0).abs() < 1e-10);
        assert!(t.sigma[1].abs() < 1e-10);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let m = random_mat(8, 6, 7);
        let t = svd(&m, 6).unwrap();
        let err = m.sub(&t.reconstruct()).unwrap().frob_norm();
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn svd_orthonormal_factors() {
        let m = random_mat(10, 7, 3);
        let t = svd(&m, 7).unwrap();
        for a in 0..7 {
            for b in 0..7 {
                let mut du = 0.0;
                for i in 0..10 {
                    du += t.u.get(i, a) * t.u.get(i, b);
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((du - expect).abs() < 1e-10);
                let mut dv = 0.0;
                for i in 0..7 {
                    dv += t.v.get(i, a) * t.v.get(i, b);
                }
                assert!((dv - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn svd_rejects_bad_inputs() {
        let mut m = Mat::zeros(2, 2);
        assert!(svd(&m, 3).is_err());
        m.set(0, 0, f64::NAN);
        assert!(svd(&m, 2).is_err());
    }

    #[test]
    fn svd_singular_values_invariant_under_permutation() {
        let m = random_mat(6, 5, 11);
        // Swap two rows and two columns.
        let perm = Mat::from_fn(6, 5, |i, j| {
            let ii = match i {
                0 => 3,
                3 => 0,
                x => x,
            };
            let jj = match j {
                1 => 4,
                4 => 1,
                x => x,
            };
            m.get(ii, jj)
        });
        let a = svd(&m, 5).unwrap();
        let b = svd(&perm, 5).unwrap();
        for k in 0..5 {
            assert!((a.sigma[k] - b.sigma[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn mse_basics() {
        let a = Mat::from_vec(2, 2, vec![1.0; 4]);
        let b = Mat::zeros(2, 2);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((mse(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(mse(&a, &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn mse_matches_elementwise_oracle() {
        let a = random_mat(16, 16, 1);
        let b = random_mat(16, 16, 2);
        let mut acc = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let d = a.get(i, j) - b.get(i, j);
                acc += d * d;
            }
        }
        let oracle = acc / 256.0;
        assert!((mse(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!((mse(&a, &b).unwrap() - mse(&b, &a).unwrap()).abs() == 0.0);
    }

    #[test]
    fn subspace_inner_examples() {
        // Orthonormal 4x2 basis.
        let u = Mat::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let first_col = [1.0, 0.0, 0.0, 0.0];
        assert!((subspace_inner(&u, &first_col).unwrap() - 1.0).abs() < 1e-12);
        let orth = [0.0, 0.0, 1.0, 0.0];
        assert!(subspace_inner(&u, &orth).unwrap().abs() < 1e-12);
        let s = 1.0 / 2.0f64.sqrt();
        let mix = [s, s, 0.0, 0.0];
        // Explicit projection: |U^T mix| = |(s, s)| = 1.
        assert!((subspace_inner(&u, &mix).unwrap() - 1.0).abs() < 1e-12);
        let not_unit = [2.0, 0.0, 0.0, 0.0];
        assert!(subspace_inner(&u, &not_unit).is_err());
    }

    #[test]
    fn subspace_inner_rotation_invariant() {
        let mut rng = derive_rng(5, "matcore-test-rot", 0);
        // Random 5x2 orthonormal basis via QR.
        let g = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0f64..1.0));
        let q = g.qr().q();
        let u = Mat::from_fn(5, 2, |i, j| q[(i, j)]);
        let theta: f64 = 0.73;
        // Rotate the basis by an orthogonal 2x2 matrix.
        let rot = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
        let u_rot = Mat::from_fn(5, 2, |i, j| {
            u.get(i, 0) * rot[0][j] + u.get(i, 1) * rot[1][j]
        });
        let mut h = vec![0.0; 5];
        for (i, slot) in h.iter_mut().enumerate() {
            *slot = (i as f64 + 1.0).sin();
        }
        let norm: f64 = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in h.iter_mut() {
            *x /= norm;
        }
        let a = subspace_inner(&u, &h).unwrap();
        let b = subspace_inner(&u_rot, &h).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gram_top_svd_agrees_with_svd() {
        for (p, n) in [(9, 6), (6, 9)] {
            let m = random_mat(p, n, 21);
            let a = svd(&m, 3).unwrap();
            let b = gram_top_svd(&m, 3);
            for k in 0..3 {
                assert!((a.sigma[k] - b.sigma[k]).abs() < 1e-8);
                let mut dot_u = 0.0;
                for i in 0..p {
                    dot_u += a.u.get(i, k) * b.u.get(i, k);
                }
                assert!((dot_u.abs() - 1.0).abs() < 1e-8);
            }
        }
    }
}
