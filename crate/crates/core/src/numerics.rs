//! Dense complex matrices and upper-half-plane geometry.
//!
//! [`ComplexMatrix`] is the value type for every point `b` at which a
//! Cauchy transform is evaluated and for every transform value. Storage is
//! a dense `nalgebra` matrix; the supported envelope is `m <= 64`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition-number cap above which [`ComplexMatrix::inverse`] refuses.
pub const CONDITION_CAP: f64 = 1e14;
/// Relative residual tolerance promised by [`ComplexMatrix::inverse`].
pub const RESIDUAL_TOL: f64 = 1e-10;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Square complex matrix.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix(DMatrix<Complex64>);

impl ComplexMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    /// `c * I_dim`.
    pub fn scalar(dim: usize, c: Complex64) -> Self {
        Self(DMatrix::from_diagonal_element(dim, dim, c))
    }

    pub fn from_diagonal(diag: &[Complex64]) -> Self {
        let n = diag.len();
        Self(DMatrix::from_fn(n, n, |i, j| if i == j { diag[i] } else { Complex64::new(0.0, 0.0) }))
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> Complex64) -> Self {
        Self(DMatrix::from_fn(dim, dim, f))
    }

    /// Builds a matrix from row-major rows; every row must have `rows.len()` entries.
    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let n = rows.len();
        for r in rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: r.len() });
            }
        }
        Ok(Self(DMatrix::from_fn(n, n, |i, j| rows[i][j])))
    }

    pub fn from_real_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<Complex64>> = rows.iter().map(|r| r.iter().map(|&x| c64(x, 0.0)).collect()).collect();
        Self::from_rows(&rows)
    }

    pub fn from_nalgebra(m: DMatrix<Complex64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
        }
        Ok(Self(m))
    }

    pub fn as_nalgebra(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_nalgebra(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.0[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.0[(i, j)] = v;
    }

    pub fn diagonal(&self) -> Vec<Complex64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.0[(i, j)] == Complex64::new(0.0, 0.0)))
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self(&self.0 * c)
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(c64(c, 0.0))
    }

    /// `self + c * I`.
    pub fn shift(&self, c: Complex64) -> Self {
        let mut out = self.0.clone();
        for i in 0..self.dim() {
            out[(i, i)] += c;
        }
        Self(out)
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    /// Kronecker product `self ⊗ other`; entry `(i*p + k, j*p + l)` is `self[i,j] * other[k,l]`.
    pub fn kron(&self, other: &Self) -> Self {
        Self(self.0.kronecker(&other.0))
    }

    /// Block-diagonal direct sum `self ⊕ other`.
    pub fn direct_sum(&self, other: &Self) -> Self {
        let (m, k) = (self.dim(), other.dim());
        let mut out = DMatrix::zeros(m + k, m + k);
        out.view_mut((0, 0), (m, m)).copy_from(&self.0);
        out.view_mut((m, m), (k, k)).copy_from(&other.0);
        Self(out)
    }

    /// The `size x size` block starting at `(row, col)`.
    pub fn block(&self, row: usize, col: usize, size: usize) -> Self {
        Self(self.0.view((row, col), (size, size)).into_owned())
    }

    pub fn set_block(&mut self, row: usize, col: usize, block: &Self) {
        let s = block.dim();
        self.0.view_mut((row, col), (s, s)).copy_from(&block.0);
    }

    /// Inverse via LU with a 1-norm condition estimate.
    ///
    /// Fails with [`Error::SingularMatrix`] when the estimate exceeds [`CONDITION_CAP`].
    pub fn inverse(&self) -> Result<Self> {
        let n = self.dim();
        if n == 0 {
            return Ok(self.clone());
        }
        if !self.is_finite() {
            return Err(Error::SingularMatrix { cond: f64::INFINITY });
        }
        let inv = match self.0.clone().lu().try_inverse() {
            Some(inv) => inv,
            None => return Err(Error::SingularMatrix { cond: f64::INFINITY }),
        };
        let cond = norm_one(&self.0) * norm_one(&inv);
        if !cond.is_finite() || cond > CONDITION_CAP {
            return Err(Error::SingularMatrix { cond });
        }
        Ok(Self(inv))
    }

    /// Solves `self * x = rhs` for a vector right-hand side.
    pub fn solve_vec(&self, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: rhs.len() });
        }
        let inv = self.inverse()?;
        let v = nalgebra::DVector::from_column_slice(rhs);
        Ok((&inv.0 * v).iter().copied().collect())
    }

    /// `(x + x*) / 2`.
    pub fn real_part(&self) -> Self {
        Self((&self.0 + self.0.adjoint()) * c64(0.5, 0.0))
    }

    /// `(x - x*) / (2i)`, Hermitian.
    pub fn imag_part(&self) -> Self {
        let d = &self.0 - self.0.adjoint();
        let mut out = d * c64(0.0, -0.5);
        symmetrize(&mut out);
        Self(out)
    }

    /// Eigenvalues of a Hermitian matrix, ascending. Only the Hermitian part is read.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        let mut h = self.0.clone();
        symmetrize(&mut h);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Eigen-decomposition `H = U diag(λ) U*` of the Hermitian part.
    pub fn hermitian_eigen(&self) -> (Vec<f64>, Self) {
        let mut h = self.0.clone();
        symmetrize(&mut h);
        let eig = h.symmetric_eigen();
        (eig.eigenvalues.iter().copied().collect(), Self(eig.eigenvectors))
    }

    /// Eigenvalues of a general square matrix (complex Schur form).
    pub fn eigenvalues(&self) -> Result<Vec<Complex64>> {
        if self.dim() == 0 {
            return Ok(Vec::new());
        }
        if !self.is_finite() {
            return Err(Error::Invalid("eigenvalues of a non-finite matrix".into()));
        }
        self.0
            .eigenvalues()
            .map(|v| v.iter().copied().collect())
            .ok_or(Error::NoConvergence { iterations: 0, residual: f64::NAN })
    }

    /// `λ_min(imag_part(x))`; the matrix lies in the upper half plane iff this is positive.
    pub fn half_plane_margin(&self) -> f64 {
        let ev = self.imag_part().hermitian_eigenvalues();
        ev.first().copied().unwrap_or(f64::INFINITY)
    }

    /// Largest singular value.
    pub fn operator_norm(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.0.singular_values().iter().fold(0.0_f64, |a, &s| a.max(s))
    }

    /// Smallest singular value.
    pub fn min_singular_value(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.0.singular_values().iter().fold(f64::INFINITY, |a, &s| a.min(s))
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim()).map(|i| self.0.row(i).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.0.iter().fold(0.0, |a, z| a.max(z.norm()))
    }

    /// Conditional expectation `id_n ⊗ tr_N` onto the outer `n x n` index.
    ///
    /// Entry `(i, j)` of the result is `(1/N) Σ_k x[iN + k, jN + k]`.
    pub fn partial_trace(&self, n: usize, big_n: usize) -> Result<Self> {
        if n == 0 || big_n == 0 || self.dim() != n * big_n {
            return Err(Error::DimensionMismatch { expected: n * big_n, got: self.dim() });
        }
        let inv_n = 1.0 / big_n as f64;
        Ok(Self::from_fn(n, |i, j| {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..big_n {
                acc += self.0[(i * big_n + k, j * big_n + k)];
            }
            acc * inv_n
        }))
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<Complex64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn from_row_major(dim: usize, entries: &[Complex64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: entries.len() });
        }
        Ok(Self::from_fn(dim, |i, j| entries[i * dim + j]))
    }

    /// Matrix unit `e_{ij}`.
    pub fn unit(dim: usize, i: usize, j: usize) -> Self {
        let mut m = Self::zeros(dim);
        m.0[(i, j)] = c64(1.0, 0.0);
        m
    }

    /// `‖self − other‖` in operator norm.
    pub fn dist(&self, other: &Self) -> f64 {
        (self - other).operator_norm()
    }
}

fn symmetrize(m: &mut DMatrix<Complex64>) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)] = c64(m[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

fn norm_one(m: &DMatrix<Complex64>) -> f64 {
    (0..m.ncols()).map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.dim();
        writeln!(f, "ComplexMatrix({n}x{n}) [")?;
        for i in 0..n {
            write!(f, "  ")?;
            for j in 0..n {
                let z = self.0[(i, j)];
                write!(f, "{:+.6e}{:+.6e}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

macro_rules! binop {
    ($tr:ident, $method:ident, $op:tt) => {
        impl $tr<&ComplexMatrix> for &ComplexMatrix {
            type Output = ComplexMatrix;
            fn $method(self, rhs: &ComplexMatrix) -> ComplexMatrix {
                ComplexMatrix(&self.0 $op &rhs.0)
            }
        }
        impl $tr<ComplexMatrix> for ComplexMatrix {
            type Output = ComplexMatrix;
            fn $method(self, rhs: ComplexMatrix) -> ComplexMatrix {
                ComplexMatrix(self.0 $op rhs.0)
            }
        }
        impl $tr<&ComplexMatrix> for ComplexMatrix {
            type Output = ComplexMatrix;
            fn $method(self, rhs: &ComplexMatrix) -> ComplexMatrix {
                ComplexMatrix(self.0 $op &rhs.0)
            }
        }
        impl $tr<ComplexMatrix> for &ComplexMatrix {
            type Output = ComplexMatrix;
            fn $method(self, rhs: ComplexMatrix) -> ComplexMatrix {
                ComplexMatrix(&self.0 $op rhs.0)
            }
        }
    };
}

binop!(Add, add, +);
binop!(Sub, sub, -);
binop!(Mul, mul, *);

impl Neg for ComplexMatrix {
    type Output = ComplexMatrix;
    fn neg(self) -> ComplexMatrix {
        ComplexMatrix(-self.0)
    }
}

impl Neg for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn neg(self) -> ComplexMatrix {
        ComplexMatrix(-self.0.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    dim: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl Serialize for ComplexMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.dim();
        let re = (0..n).map(|i| (0..n).map(|j| self.0[(i, j)].re).collect()).collect();
        let im = (0..n).map(|i| (0..n).map(|j| self.0[(i, j)].im).collect()).collect();
        MatrixJson { dim: n, re, im }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ComplexMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = MatrixJson::deserialize(d)?;
        let n = j.dim;
        let ok = j.re.len() == n && j.im.len() == n && j.re.iter().chain(j.im.iter()).all(|r| r.len() == n);
        if !ok {
            return Err(D::Error::custom(format!("matrix rows do not match dim {n}")));
        }
        Ok(Self::from_fn(n, |i, k| c64(j.re[i][k], j.im[i][k])))
    }
}

/// A matrix certified to lie in the upper half plane with `Im(matrix) >= margin`.
#[derive(Debug, Clone)]
pub struct HalfPlaneMargin {
    matrix: ComplexMatrix,
    margin: f64,
}

impl HalfPlaneMargin {
    /// Accepts `matrix` iff `λ_min(Im matrix) > 0`; the margin is that eigenvalue.
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        let margin = matrix.half_plane_margin();
        if margin > 0.0 {
            Ok(Self { matrix, margin })
        } else {
            Err(Error::MarginViolation(format!("imaginary part has eigenvalue {margin} <= 0")))
        }
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn close(a: &ComplexMatrix, b: &ComplexMatrix, tol: f64) -> bool {
        (a - b).max_abs_entry() <= tol
    }

    #[test]
    fn inverse_of_identity_and_diagonal() {
        let id = ComplexMatrix::identity(3);
        assert!(close(&id.inverse().unwrap(), &id, 0.0));
        let d = ComplexMatrix::from_diagonal(&[c64(0.0, 2.0), c64(0.0, -2.0)]);
        let expect = ComplexMatrix::from_diagonal(&[c64(0.0, -0.5), c64(0.0, 0.5)]);
        assert!(close(&d.inverse().unwrap(), &expect, 1e-15));
    }

    #[test]
    fn inverse_rejects_singular() {
        let m = ComplexMatrix::from_real_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(m.inverse(), Err(Error::SingularMatrix { .. })));
        let near = ComplexMatrix::from_real_rows(&[vec![1.0, 0.0], vec![0.0, 1e-16]]).unwrap();
        assert!(matches!(near.inverse(), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn imag_part_examples() {
        let m = ComplexMatrix::scalar(2, c64(0.0, 3.0));
        assert!(close(&m.imag_part(), &ComplexMatrix::scalar(2, c64(3.0, 0.0)), 1e-15));

        let h = ComplexMatrix::from_rows(&[vec![c64(1.0, 0.0), c64(2.0, 1.0)], vec![c64(2.0, -1.0), c64(-3.0, 0.0)]])
            .unwrap();
        assert!(close(&h.imag_part(), &ComplexMatrix::zeros(2), 1e-15));

        let x = ComplexMatrix::from_rows(&[vec![c64(0.0, 1.0), c64(1.0, 0.0)], vec![c64(0.0, 0.0), c64(0.0, 1.0)]])
            .unwrap();
        let expect =
            ComplexMatrix::from_rows(&[vec![c64(1.0, 0.0), c64(0.0, -0.5)], vec![c64(0.0, 0.5), c64(1.0, 0.0)]])
                .unwrap();
        let im = x.imag_part();
        assert!(close(&im, &expect, 1e-15));
        let rebuilt = x.real_part() + im.scale(I);
        assert!(close(&rebuilt, &x, 1e-15));
    }

    #[test]
    fn half_plane_margin_examples() {
        assert_abs_diff_eq!(ComplexMatrix::scalar(3, c64(0.0, 2.0)).half_plane_margin(), 2.0, epsilon = 1e-14);
        let d = ComplexMatrix::from_diagonal(&[c64(0.0, 1.0), c64(0.0, -1.0)]);
        assert_abs_diff_eq!(d.half_plane_margin(), -1.0, epsilon = 1e-14);
        let m = ComplexMatrix::from_rows(&[vec![c64(0.0, 2.0), c64(1.0, 0.0)], vec![c64(1.0, 0.0), c64(0.0, 2.0)]])
            .unwrap();
        // Im m = [[2, 0], [0, 2]] since the off-diagonal 1s are Hermitian.
        assert_abs_diff_eq!(m.half_plane_margin(), 2.0, epsilon = 1e-14);
        let m = ComplexMatrix::from_rows(&[vec![c64(0.0, 2.0), c64(0.0, 1.0)], vec![c64(0.0, 1.0), c64(0.0, 2.0)]])
            .unwrap();
        assert_abs_diff_eq!(m.half_plane_margin(), 1.0, epsilon = 1e-14);
        assert!(HalfPlaneMargin::new(d).is_err());
        assert_abs_diff_eq!(HalfPlaneMargin::new(m).unwrap().margin(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn operator_norm_examples() {
        assert_abs_diff_eq!(ComplexMatrix::identity(4).operator_norm(), 1.0, epsilon = 1e-14);
        let d = ComplexMatrix::from_diagonal(&[c64(3.0, 0.0), c64(0.0, -4.0)]);
        assert_abs_diff_eq!(d.operator_norm(), 4.0, epsilon = 1e-13);
    }

    #[test]
    fn partial_trace_examples() {
        let b = ComplexMatrix::from_rows(&[vec![c64(1.0, 2.0), c64(3.0, 0.0)], vec![c64(0.0, -1.0), c64(4.0, 4.0)]])
            .unwrap();
        let lifted = b.kron(&ComplexMatrix::identity(5));
        assert!(close(&lifted.partial_trace(2, 5).unwrap(), &b, 1e-15));

        let m = ComplexMatrix::from_fn(3, |i, j| c64((i + 2 * j) as f64, i as f64));
        let x = ComplexMatrix::identity(2).kron(&m);
        let expect = ComplexMatrix::scalar(2, m.trace() / 3.0);
        assert!(close(&x.partial_trace(2, 3).unwrap(), &expect, 1e-14));

        let pt = m.partial_trace(1, 3).unwrap();
        assert_abs_diff_eq!((pt.get(0, 0) - m.trace() / 3.0).norm(), 0.0, epsilon = 1e-14);

        assert!(matches!(m.partial_trace(2, 2), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn json_layout_is_row_major() {
        let m = ComplexMatrix::from_rows(&[vec![c64(1.0, 0.5), c64(2.0, 0.0)], vec![c64(3.0, 0.0), c64(4.0, -1.0)]])
            .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"dim":2,"re":[[1.0,2.0],[3.0,4.0]],"im":[[0.5,0.0],[0.0,-1.0]]}"#);
        let back: ComplexMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<ComplexMatrix>(r#"{"dim":2,"re":[[1.0]],"im":[[0.0]]}"#).is_err());
    }
}
