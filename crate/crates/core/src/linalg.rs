//! Dense row-major matrices and the handful of decompositions the analysis
//! code needs: one-sided Jacobi SVD, cyclic Jacobi symmetric eigensolver and
//! PCA built on top of them.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{bail, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Shape, "buffer of length {} cannot form a {rows}x{cols} matrix", data.len());
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                bail!(Shape, "row {i} has length {} but row 0 has {cols}", r.len());
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    /// Copies the rows listed in `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            bail!(Shape, "elementwise op on {:?} and {:?}", self.shape(), other.shape());
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            bail!(Shape, "matmul {:?} x {:?}", self.shape(), other.shape());
        }
        Ok(gemm(self, false, other, false))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            bail!(Shape, "matmul_t {:?} x {:?}ᵀ", self.shape(), other.shape());
        }
        Ok(gemm(self, false, other, true))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            bail!(Shape, "t_matmul {:?}ᵀ x {:?}", self.shape(), other.shape());
        }
        Ok(gemm(self, true, other, false))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            bail!(Shape, "matvec {:?} x vector of length {}", self.shape(), v.len());
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers of `a`, `b` and
    // `out`, whose lengths are checked by construction.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin singular value decomposition `m = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub left_vectors: Matrix,
    /// `cols × k` with orthonormal columns.
    pub right_vectors: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.left_vectors.clone();
        for r in 0..us.rows() {
            for (c, s) in self.singular_values.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul_t(&self.right_vectors).expect("svd factors have matching shapes")
    }
}

const MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns are orthogonalised pairwise until every pair is orthogonal to
/// machine precision. Wide inputs are handled through the transpose so that
/// the working set is always the shorter side.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.is_empty() {
        bail!(Dimension, "svd of an empty {:?} matrix", m.shape());
    }
    if !m.all_finite() {
        bail!(Value, "svd input contains non-finite entries");
    }
    if m.rows < m.cols {
        let t = svd(&m.transpose())?;
        let mut out =
            Svd { singular_values: t.singular_values, left_vectors: t.right_vectors, right_vectors: t.left_vectors };
        fix_svd_signs(&mut out);
        return Ok(out);
    }

    let (rows, n) = m.shape();
    // Work column-major: `cols[j]` is column j of the evolving U·Σ.
    let t = m.transpose();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| t.row(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let order = descending_order(&sigma);
    let scale_ref = sigma.iter().cloned().fold(0.0, f64::max);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > scale_ref * 1e-300 && sigma[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let mut out = Svd {
        singular_values: order.iter().map(|&j| sigma[j]).collect(),
        left_vectors: columns_to_matrix(&u_cols, rows),
        right_vectors: columns_to_matrix(&order.iter().map(|&j| v[j].clone()).collect::<Vec<_>>(), n),
    };
    fix_svd_signs(&mut out);
    Ok(out)
}

#[inline]
fn rotate(xp: &mut [f64], xq: &mut [f64], c: f64, s: f64) {
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Indices sorted by descending value; ties keep the original index order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Replaces the columns listed in `slots` with unit vectors orthogonal to all
/// other columns (Gram–Schmidt over the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut basis = 0;
    for &slot in slots {
        while basis < dim {
            let mut e = vec![0.0; dim];
            e[basis] = 1.0;
            basis += 1;
            // Two passes of modified Gram–Schmidt.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let nrm = norm(&e);
            if nrm > 1e-6 {
                cols[slot] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

fn first_significant(values: impl Iterator<Item = f64>) -> f64 {
    for x in values {
        if x.abs() > 1e-12 {
            return x;
        }
    }
    0.0
}

/// Makes the first significant entry of every left singular vector positive,
/// flipping the paired right vector along with it.
fn fix_svd_signs(s: &mut Svd) {
    for c in 0..s.singular_values.len() {
        let lead = first_significant((0..s.left_vectors.rows()).map(|r| s.left_vectors[(r, c)]));
        if lead < 0.0 {
            for r in 0..s.left_vectors.rows() {
                s.left_vectors[(r, c)] = -s.left_vectors[(r, c)];
            }
            for r in 0..s.right_vectors.rows() {
                s.right_vectors[(r, c)] = -s.right_vectors[(r, c)];
            }
        }
    }
}

/// Eigenpairs of a symmetric matrix. Column `i` of `eigenvectors` pairs with
/// `eigenvalues[i]`; eigenvalues are sorted descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

pub const SYMMETRY_TOL: f64 = 1e-10;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn eig_sym(m: &Matrix) -> Result<SymmetricEigen> {
    if m.rows != m.cols {
        bail!(Shape, "eig_sym needs a square matrix, got {:?}", m.shape());
    }
    if m.is_empty() {
        bail!(Dimension, "eig_sym of an empty matrix");
    }
    if !m.all_finite() {
        bail!(Value, "eig_sym input contains non-finite entries");
    }
    let tol = SYMMETRY_TOL * m.max_abs().max(1.0);
    if !m.is_symmetric(tol) {
        bail!(Shape, "eig_sym input is not symmetric within {tol:e}");
    }
    let n = m.rows;
    let mut a = m.clone();
    // Symmetrise exactly so rotations see a consistent matrix.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)].powi(2)).sum();
        if off <= f64::EPSILON * f64::EPSILON * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let lambda: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let order = descending_order(&lambda);
    let mut vecs = Matrix::zeros(n, n);
    for (slot, &j) in order.iter().enumerate() {
        let lead = first_significant((0..n).map(|r| v[(r, j)]));
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[(r, slot)] = sign * v[(r, j)];
        }
    }
    Ok(SymmetricEigen { eigenvalues: order.iter().map(|&j| lambda[j]).collect(), eigenvectors: vecs })
}

/// A fitted principal component basis.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k × n_dims`, orthonormal rows.
    pub components: Matrix,
    /// Sample variance along each component, descending.
    pub explained_variance: Vec<f64>,
}

/// Fits the top-`k` principal components of `points` (`n_samples × n_dims`).
///
/// Uses the covariance matrix when `n_dims ≤ n_samples` and the sample Gram
/// matrix otherwise, so flattened weight matrices with tens of thousands of
/// entries stay cheap.
pub fn pca_fit(points: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = points.shape();
    if n < 2 {
        bail!(Dimension, "pca needs at least 2 samples, got {n}");
    }
    if k == 0 || k > n.min(d) {
        bail!(Dimension, "pca with k = {k} on {n} samples of dimension {d}");
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(points.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = points.clone();
    for r in 0..n {
        for (x, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let denom = (n - 1) as f64;

    let (components, variance) = if d <= n {
        let cov = symmetric_product(&centered.transpose()).scale(1.0 / denom);
        let eig = eig_sym(&cov)?;
        let comps = Matrix::from_fn(k, d, |i, j| eig.eigenvectors[(j, i)]);
        (comps, eig.eigenvalues[..k].iter().map(|&l| l.max(0.0)).collect::<Vec<_>>())
    } else {
        let gram = symmetric_product(&centered);
        let eig = eig_sym(&gram)?;
        let top = eig.eigenvalues[0].max(0.0);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut deficient = Vec::new();
        for i in 0..k {
            let lambda = eig.eigenvalues[i];
            let u = eig.eigenvectors.column(i);
            let mut comp = centered.t_matmul(&Matrix::from_vec(n, 1, u)?)?.into_vec();
            let nrm = norm(&comp);
            if lambda > top * 1e-12 && nrm > 0.0 {
                comp.iter_mut().for_each(|x| *x /= nrm);
            } else {
                comp = vec![0.0; d];
                deficient.push(i);
            }
            rows.push(comp);
        }
        complete_orthonormal(&mut rows, &deficient);
        let var = (0..k).map(|i| (eig.eigenvalues[i] / denom).max(0.0)).collect::<Vec<_>>();
        (Matrix::from_rows(&rows)?, var)
    };

    let mut components = components;
    for i in 0..k {
        let lead = first_significant(components.row(i).iter().copied());
        if lead < 0.0 {
            components.row_mut(i).iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(Pca { mean, components, explained_variance: variance })
}

/// `x · xᵀ`, with the result made exactly symmetric.
fn symmetric_product(x: &Matrix) -> Matrix {
    let mut g = x.matmul_t(x).expect("x·xᵀ is always conformable");
    let n = g.rows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = avg;
            g[(j, i)] = avg;
        }
    }
    g
}

impl Pca {
    pub fn project(&self, point: &[f64]) -> Result<Vec<f64>> {
        pca_project(&self.mean, &self.components, point)
    }

    /// `mean + componentsᵀ · coords`
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.components.rows() {
            bail!(Shape, "{} coordinates for {} components", coords.len(), self.components.rows());
        }
        let mut out = self.mean.clone();
        for (i, c) in coords.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.components.row(i)) {
                *o += c * v;
            }
        }
        Ok(out)
    }
}

/// `components · (point − mean)`
pub fn pca_project(mean: &[f64], components: &Matrix, point: &[f64]) -> Result<Vec<f64>> {
    if point.len() != mean.len() || components.cols() != mean.len() {
        bail!(
            Shape,
            "projecting a point of length {} with mean {} and components {:?}",
            point.len(),
            mean.len(),
            components.shape()
        );
    }
    let centered: Vec<f64> = point.iter().zip(mean).map(|(p, m)| p - m).collect();
    components.matvec(&centered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn assert_orthonormal_columns(m: &Matrix, tol: f64) {
        let g = m.t_matmul(m).unwrap();
        let err = g.max_abs_diff(&Matrix::identity(m.cols())).unwrap();
        assert!(err < tol, "columns not orthonormal: {err:e}");
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.singular_values, vec![1.0, 1.0, 1.0]);
        let s = svd(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0, 1.0]);
        assert!(s.reconstruct().max_abs_diff(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap() < 1e-15);
    }

    #[test]
    fn svd_empty_is_dimension_error() {
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn svd_tall_and_wide_reconstruct() {
        for &(r, c) in &[(6, 4), (4, 6), (1, 5), (5, 1), (17, 17)] {
            let m = random(r, c, (r * 31 + c) as u64);
            let s = svd(&m).unwrap();
            assert!(s.reconstruct().max_abs_diff(&m).unwrap() < 1e-12);
            assert_orthonormal_columns(&s.left_vectors, 1e-12);
            assert_orthonormal_columns(&s.right_vectors, 1e-12);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        // rank 1, 4x3
        let m = Matrix::from_fn(4, 3, |r, c| (r + 1) as f64 * (c as f64 - 1.5));
        let s = svd(&m).unwrap();
        assert!(s.singular_values[1] < 1e-12);
        assert_orthonormal_columns(&s.left_vectors, 1e-12);
        assert!(s.reconstruct().max_abs_diff(&m).unwrap() < 1e-12);

        let z = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(z.singular_values, vec![0.0, 0.0]);
        assert_orthonormal_columns(&z.left_vectors, 1e-12);
    }

    #[test]
    fn svd_sign_convention() {
        let m = random(5, 3, 9).scale(-1.0);
        let s = svd(&m).unwrap();
        for c in 0..3 {
            let lead = s.left_vectors.column(c).into_iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn eig_sym_small_cases() {
        let e = eig_sym(&Matrix::identity(2)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0]);

        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = eig_sym(&m).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let v1 = e.eigenvectors.column(0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v1[0] - h).abs() < 1e-14 && (v1[1] - h).abs() < 1e-14);
    }

    #[test]
    fn eig_sym_rejects_bad_input() {
        assert!(matches!(eig_sym(&Matrix::zeros(2, 3)), Err(crate::Error::Shape(_))));
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eig_sym(&m), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn eig_sym_pairs_and_trace() {
        let a = random(7, 7, 3);
        let m = a.add(&a.transpose()).unwrap();
        let e = eig_sym(&m).unwrap();
        for i in 0..7 {
            let v = e.eigenvectors.column(i);
            let mv = m.matvec(&v).unwrap();
            for (x, y) in mv.iter().zip(&v) {
                assert!((x - e.eigenvalues[i] * y).abs() < 1e-10);
            }
        }
        assert_orthonormal_columns(&e.eigenvectors, 1e-12);
        let sum: f64 = e.eigenvalues.iter().sum();
        assert!((sum - m.trace()).abs() < 1e-8 * m.trace().abs().max(1.0));
    }

    #[test]
    fn pca_collinear_points() {
        let pts = Matrix::from_fn(6, 2, |r, c| if c == 0 { r as f64 } else { 2.0 * r as f64 });
        let p = pca_fit(&pts, 2).unwrap();
        let s5 = 5f64.sqrt();
        assert!((p.components[(0, 0)] - 1.0 / s5).abs() < 1e-12);
        assert!((p.components[(0, 1)] - 2.0 / s5).abs() < 1e-12);
        assert!(p.explained_variance[1].abs() < 1e-12);
    }

    #[test]
    fn pca_k_too_large() {
        let pts = random(3, 5, 1);
        assert!(matches!(pca_fit(&pts, 4), Err(crate::Error::Dimension(_))));
        assert!(matches!(pca_fit(&random(1, 5, 1), 1), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn pca_translation_invariance() {
        let pts = random(20, 4, 11);
        let shifted = pts.map(|x| x + 7.5);
        let a = pca_fit(&pts, 3).unwrap();
        let b = pca_fit(&shifted, 3).unwrap();
        assert!(a.components.max_abs_diff(&b.components).unwrap() < 1e-9);
        for (x, y) in a.explained_variance.iter().zip(&b.explained_variance) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_wide_data_uses_gram_route() {
        // 5 samples in 40 dims, full k = 5 forces basis completion.
        let pts = random(5, 40, 5);
        let p = pca_fit(&pts, 5).unwrap();
        let g = p.components.matmul_t(&p.components).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(5)).unwrap() < 1e-9);
        assert!(p.explained_variance[4] < 1e-12);

        // Same top components as the covariance route.
        let cov_route = {
            let mut mean = vec![0.0; 40];
            for r in 0..5 {
                for (m, x) in mean.iter_mut().zip(pts.row(r)) {
                    *m += x / 5.0;
                }
            }
            let c = Matrix::from_fn(5, 40, |r, j| pts[(r, j)] - mean[j]);
            eig_sym(&c.t_matmul(&c).unwrap().scale(0.25)).unwrap()
        };
        for i in 0..4 {
            assert!((cov_route.eigenvalues[i] - p.explained_variance[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_project_basics() {
        let pts = random(10, 3, 2);
        let p = pca_fit(&pts, 2).unwrap();
        let z = p.project(&p.mean).unwrap();
        assert!(z.iter().all(|x| x.abs() < 1e-15));
        let shifted: Vec<f64> = p.mean.iter().zip(p.components.row(0)).map(|(m, c)| m + c).collect();
        let z = p.project(&shifted).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12 && z[1].abs() < 1e-12);
        assert!(matches!(p.project(&[1.0]), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn matmul_variants_agree_with_transpose() {
        let a = random(4, 3, 1);
        let b = random(5, 3, 2);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert!(a.matmul_t(&b).unwrap().max_abs_diff(&direct).unwrap() < 1e-15);
        let c = random(4, 6, 3);
        let tm = a.transpose().matmul(&c).unwrap();
        assert!(a.t_matmul(&c).unwrap().max_abs_diff(&tm).unwrap() < 1e-15);
        assert!(a.matmul(&c).is_err());
    }
}
