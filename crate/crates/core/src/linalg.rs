//! Dense row-major `f64` matrices and the handful of vector operations the
//! losses and encoders are built from.
//!
//! Reductions always run left to right over the inner index so that a fixed
//! seed reproduces results bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};

/// Below this norm a vector is treated as zero.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(OvtError::dims(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(OvtError::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(OvtError::dims(
                "Matrix::from_rows",
                format!("row length {cols}"),
                format!("row length {}", r.len()),
            ));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`, summing left to right over the inner index.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows || self.cols == 0 {
            return Err(OvtError::dims("matmul", self.shape_str(), other.shape_str()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.cols {
                let mut acc = 0.0;
                for (k, a) in a_row.iter().enumerate() {
                    acc += a * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        if !out.is_finite() {
            return Err(OvtError::NonFinite(format!(
                "matmul of {} and {}",
                self.shape_str(),
                other.shape_str()
            )));
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(OvtError::dims(
                "matvec",
                self.shape_str(),
                format!("vector of {}", v.len()),
            ));
        }
        Ok(self.iter_rows().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(OvtError::dims(
                "matvec_t",
                self.shape_str(),
                format!("vector of {}", v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vi) in self.iter_rows().zip(v) {
            for (o, a) in out.iter_mut().zip(r) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(OvtError::dims("add", self.shape_str(), other.shape_str()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += scale · other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(OvtError::dims("axpy", self.shape_str(), other.shape_str()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s == 0.0 {
                continue;
            }
            for (a, &vj) in self.row_mut(i).iter_mut().zip(v) {
                *a += s * vj;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unit-norm copy of `v`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > MIN_NORM) || !n.is_finite() {
        return Err(OvtError::Normalization { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(OvtError::dims("cosine_similarity", a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if !(na > MIN_NORM) || !(nb > MIN_NORM) {
        return Err(OvtError::Normalization { norm: na.min(nb) });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cosine_similarity(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a == b {
        // Bitwise-equal inputs must give exactly zero.
        cosine_similarity(a, b)?;
        return Ok(0.0);
    }
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Gradient of `cosine_distance(a, b)` with respect to `a`.
pub fn cosine_distance_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let na = norm(a);
    let nb = norm(b);
    if !(na > MIN_NORM) || !(nb > MIN_NORM) {
        return Err(OvtError::Normalization { norm: na.min(nb) });
    }
    let cos = dot(a, b) / (na * nb);
    // d(1 - a·b/(|a||b|))/da = -(b̂ - cos·â)/|a|
    Ok(a.iter().zip(b).map(|(x, y)| -(y / nb - cos * x / na) / na).collect())
}

/// Backpropagates a gradient on `v/|v|` to a gradient on `v`.
pub fn normalize_backward(v: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = norm(v);
    let proj = dot(v, grad_unit) / n;
    v.iter().zip(grad_unit).map(|(x, g)| (g - proj * x / n) / n).collect()
}

/// Numerically stable softmax of a single vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(OvtError::NonFinite("softmax_rows input".into()));
    }
    let mut out = m.clone();
    for i in 0..m.rows() {
        let s = softmax(m.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    Ok(out)
}

/// Solves `a · x = b` for square `a` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(OvtError::dims("solve", a.shape_str(), b.shape_str()));
    }
    let m = b.cols();
    let mut lhs = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lhs.get(i, col).abs().total_cmp(&lhs.get(j, col).abs()))
            .unwrap_or(col);
        if lhs.get(pivot, col).abs() < 1e-14 {
            return Err(OvtError::NonFinite("singular system in solve".into()));
        }
        if pivot != col {
            for j in 0..n {
                let t = lhs.get(col, j);
                lhs.set(col, j, lhs.get(pivot, j));
                lhs.set(pivot, j, t);
            }
            for j in 0..m {
                let t = rhs.get(col, j);
                rhs.set(col, j, rhs.get(pivot, j));
                rhs.set(pivot, j, t);
            }
        }
        let p = lhs.get(col, col);
        for i in col + 1..n {
            let f = lhs.get(i, col) / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lhs.set(i, j, lhs.get(i, j) - f * lhs.get(col, j));
            }
            for j in 0..m {
                rhs.set(i, j, rhs.get(i, j) - f * rhs.get(col, j));
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for j in 0..m {
        for i in (0..n).rev() {
            let mut acc = rhs.get(i, j);
            for k in i + 1..n {
                acc -= lhs.get(i, k) * x.get(k, j);
            }
            x.set(i, j, acc / lhs.get(i, i));
        }
    }
    Ok(x)
}

/// One coordinate of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoordError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub errors: Vec<CoordError>,
}

impl GradCheckReport {
    /// Largest relative error among coordinates in `range`.
    pub fn max_in(&self, range: std::ops::Range<usize>) -> f64 {
        self.errors[range].iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Denominator floor: below this magnitude the error is effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against fourth-order central differences of `f` around `params`.
///
/// `h` must lie in `[1e-7, 1e-3]`.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(OvtError::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(OvtError::dims("finite_difference_check", params.len(), analytic.len()));
    }
    let mut x = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    let mut max_rel: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        let mut at = |offset: f64| -> Result<f64> {
            x[i] = orig + offset;
            let v = f(&x)?;
            if !v.is_finite() {
                return Err(OvtError::NonFinite(format!("objective at coordinate {i}")));
            }
            Ok(v)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        x[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let rel = relative_error(analytic[i], numeric);
        max_rel = max_rel.max(rel);
        errors.push(CoordError {
            index: i,
            analytic: analytic[i],
            numeric,
            relative_error: rel,
        });
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for k in 0..b.len() {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_outer() {
        let x = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&x).unwrap(), x);

        let a = vec![vec![2.0], vec![0.0]];
        let b = vec![vec![1.0, 1.0]];
        let got = Matrix::from_rows(&a)
            .unwrap()
            .matmul(&Matrix::from_rows(&b).unwrap())
            .unwrap();
        let want = Matrix::from_rows(&naive_matmul(&a, &b)).unwrap();
        assert_eq!(got, want);
        assert_eq!(got, Matrix::from_rows(&[vec![2.0, 2.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::zeros(1, 0);
        let b = Matrix::zeros(0, 1);
        assert!(matches!(a.matmul(&b), Err(OvtError::Dimension { .. })));
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn normalize_cases() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = [0.0, 1.0, 0.0];
        let w = l2_normalize(&u).unwrap();
        for (a, b) in u.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(OvtError::Normalization { .. })));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.7071067811865475).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());

        assert_eq!(cosine_distance(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        let single = softmax_rows(&Matrix::from_rows(&[vec![-3.7]]).unwrap()).unwrap();
        assert_eq!(single.row(0), &[1.0]);
    }

    #[test]
    fn solve_recovers_solution() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.0], vec![0.5, 0.0, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5], vec![-3.0, 0.0]]).unwrap();
        let b = a.matmul(&x).unwrap();
        let got = solve(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(x.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_quadratic_and_constant() {
        let r = finite_difference_check(|p| Ok(p[0] * p[0]), &[3.0], &[6.0], 1e-5).unwrap();
        assert!((r.errors[0].numeric - 6.0).abs() < 1e-6);
        assert!(r.passed(1e-8));

        let r = finite_difference_check(|_| Ok(2.5), &[1.0, -4.0], &[0.0, 0.0], 1e-4).unwrap();
        for e in &r.errors {
            assert!(e.numeric.abs() < 1e-8);
        }
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn gradcheck_rejects_bad_step_and_nan() {
        assert!(finite_difference_check(|_| Ok(0.0), &[0.0], &[0.0], 1e-2).is_err());
        assert!(finite_difference_check(|_| Ok(f64::NAN), &[0.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn cosine_distance_gradient_matches_differences() {
        let a = [0.3, -1.2, 0.8];
        let b = [1.0, 0.4, -0.2];
        let g = cosine_distance_grad(&a, &b).unwrap();
        let r = finite_difference_check(|p| cosine_distance(p, &b), &a, &g, 1e-5).unwrap();
        assert!(r.passed(1e-6), "{r:?}");
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() < 1e-10);
            }
        }

        #[test]
        fn cosine_distance_symmetric_and_zero_on_diagonal(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            prop_assert_eq!(cosine_distance(&a, &b).unwrap(), cosine_distance(&b, &a).unwrap());
            prop_assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
        }

        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..6), shift in -50.0f64..50.0) {
            let m = Matrix::from_vec(1, row.len(), row.clone()).unwrap();
            let shifted = Matrix::from_vec(1, row.len(), row.iter().map(|x| x + shift).collect()).unwrap();
            let a = softmax_rows(&m).unwrap();
            let b = softmax_rows(&shifted).unwrap();
            let sum: f64 = a.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-100.0f64..100.0, 1..10)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
        }
    }
}
