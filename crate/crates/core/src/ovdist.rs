//! `B`-valued random variables over `B = M_n(C)`, each presented through its
//! amplified Cauchy transform `G^{(m)}(b) = E[(b − X⊗1_m)^{-1}]`.
//!
//! Amplification convention: a point `b` of `M_m(B)` is an `(m·n)`-square
//! matrix whose `n`-blocks are the `B`-entries, so `X` amplifies to
//! `1_m ⊗ X` (block diagonal).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{quantile_nodes, ScalarMeasure};
use crate::moments::{
    matrix_g_via_neumann, neumann_dominance, neumann_path_count, neumann_tail_bound, IndependenceMode, Letter,
};
use crate::numerics::{c64, ComplexMatrix};

const SEMICIRCULAR_TOL: f64 = 1e-12;
const SEMICIRCULAR_MAX_ITER: usize = 10_000;
const NEUMANN_TARGET_TAIL: f64 = 1e-12;
const NEUMANN_MAX_ORDER: usize = 400;
const NEUMANN_MAX_PATHS: f64 = 2e5;
const NORMALITY_TOL: f64 = 1e-12;

/// Monte-Carlo parameters: block size `N`, number of trials and base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McOptions {
    #[serde(rename = "N")]
    pub size: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Realization {
    #[serde(rename = "haar", alias = "HaarRotated")]
    HaarRotated,
    #[serde(rename = "gue", alias = "GUE")]
    Gue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVar {
    pub law: ScalarMeasure,
    pub realization: Realization,
}

/// Random matrix model: `vars` realized as independent `N×N` matrices and
/// combined by the `mixer` polynomial with `n×n` coefficients.
///
/// Mixer grammar: `+`, `-`, `*`, parentheses, real numbers, `X<k>` (one-based
/// variable), `E<i>_<j>` (matrix unit of `M_n`) and names from `constants`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixModelSpec {
    pub n: usize,
    #[serde(rename = "N")]
    pub size: usize,
    pub trials: usize,
    pub seed: u64,
    pub vars: Vec<ModelVar>,
    pub mixer: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, ComplexMatrix>,
}

impl MatrixModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Invalid("matrix model needs n ≥ 1".into()));
        }
        if self.size < 2 {
            return Err(Error::Invalid("matrix model needs N ≥ 2".into()));
        }
        if self.trials < 2 {
            return Err(Error::Invalid("matrix model needs at least 2 trials".into()));
        }
        for (k, v) in self.vars.iter().enumerate() {
            v.law.validate()?;
            if v.realization == Realization::Gue && !matches!(v.law, ScalarMeasure::Semicircle { .. }) {
                return Err(Error::Invalid(format!("variable X{}: GUE realization needs a semicircle law", k + 1)));
            }
        }
        for (name, c) in &self.constants {
            if c.dim() != self.n {
                return Err(Error::Invalid(format!("constant {name} must be {0}x{0}", self.n)));
            }
        }
        let expr = parse_mixer(&self.mixer)?;
        expr.check(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backend {
    ScalarEmbedded {
        law: ScalarMeasure,
    },
    DiracB {
        b0: ComplexMatrix,
    },
    OvSemicircular {
        coeffs: Vec<ComplexMatrix>,
    },
    DiagonalIndependent {
        laws: Vec<ScalarMeasure>,
        mode: IndependenceMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mc: Option<McOptions>,
    },
    MatrixModel(MatrixModelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OVDistribution {
    pub base_dim: usize,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: ComplexMatrix,
    /// Entrywise max standard error over real and imaginary parts.
    pub stderr: f64,
    pub trials: usize,
}

impl OVDistribution {
    pub fn scalar_embedded(base_dim: usize, law: ScalarMeasure) -> Result<Self> {
        let d = Self { base_dim, backend: Backend::ScalarEmbedded { law } };
        d.validate()?;
        Ok(d)
    }

    pub fn dirac(b0: ComplexMatrix) -> Result<Self> {
        let d = Self { base_dim: b0.dim(), backend: Backend::DiracB { b0 } };
        d.validate()?;
        Ok(d)
    }

    pub fn ov_semicircular(coeffs: Vec<ComplexMatrix>) -> Result<Self> {
        let n = coeffs.first().map(ComplexMatrix::dim).ok_or_else(|| Error::Invalid("no coefficients".into()))?;
        let d = Self { base_dim: n, backend: Backend::OvSemicircular { coeffs } };
        d.validate()?;
        Ok(d)
    }

    pub fn diagonal_independent(laws: Vec<ScalarMeasure>, mode: IndependenceMode) -> Result<Self> {
        let d = Self { base_dim: laws.len(), backend: Backend::DiagonalIndependent { laws, mode, mc: None } };
        d.validate()?;
        Ok(d)
    }

    pub fn matrix_model(spec: MatrixModelSpec) -> Result<Self> {
        let d = Self { base_dim: spec.n, backend: Backend::MatrixModel(spec) };
        d.validate()?;
        Ok(d)
    }

    /// Enables Monte-Carlo fallback for a diagonal-independent variable.
    pub fn with_mc(mut self, opts: McOptions) -> Self {
        if let Backend::DiagonalIndependent { mc, .. } = &mut self.backend {
            *mc = Some(opts);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.base_dim;
        if n == 0 {
            return Err(Error::Invalid("base dimension must be positive".into()));
        }
        match &self.backend {
            Backend::ScalarEmbedded { law } => law.validate(),
            Backend::DiracB { b0 } => {
                if b0.dim() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: b0.dim() });
                }
                if (b0 - &b0.adjoint()).max_abs_entry() > 1e-12 * (1.0 + b0.max_abs_entry()) {
                    return Err(Error::Invalid("Dirac point must be Hermitian".into()));
                }
                Ok(())
            }
            Backend::OvSemicircular { coeffs } => {
                if coeffs.is_empty() {
                    return Err(Error::Invalid("no coefficients".into()));
                }
                if let Some(a) = coeffs.iter().find(|a| a.dim() != n) {
                    return Err(Error::DimensionMismatch { expected: n, got: a.dim() });
                }
                let eta_one = eta(coeffs, &ComplexMatrix::identity(n));
                let min_ev = eta_one.hermitian_eigenvalues()[0];
                if min_ev < -1e-12 * (1.0 + eta_one.max_abs_entry()) {
                    return Err(Error::Invalid("covariance map is not positive".into()));
                }
                Ok(())
            }
            Backend::DiagonalIndependent { laws, mc, .. } => {
                if laws.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: laws.len() });
                }
                laws.iter().try_for_each(ScalarMeasure::validate)?;
                if let Some(o) = mc {
                    if o.size < 2 || o.trials < 2 {
                        return Err(Error::Invalid("MC needs N ≥ 2 and trials ≥ 2".into()));
                    }
                }
                Ok(())
            }
            Backend::MatrixModel(spec) => {
                if spec.n != n {
                    return Err(Error::DimensionMismatch { expected: n, got: spec.n });
                }
                spec.validate()
            }
        }
    }

    fn amplification(&self, b: &ComplexMatrix) -> Result<usize> {
        let n = self.base_dim;
        if b.dim() == 0 || !b.dim().is_multiple_of(n) {
            return Err(Error::DimensionMismatch { expected: n, got: b.dim() });
        }
        if !b.is_finite() {
            return Err(Error::Invalid("non-finite evaluation point".into()));
        }
        Ok(b.dim() / n)
    }
}

/// `η(b) = Σ_j a_j b a_j*`, applied blockwise when `b` is amplified.
fn eta(coeffs: &[ComplexMatrix], b: &ComplexMatrix) -> ComplexMatrix {
    let n = coeffs[0].dim();
    let m = b.dim() / n;
    let mut out = ComplexMatrix::zeros(b.dim());
    for i in 0..m {
        for j in 0..m {
            let blk = b.block(i * n, j * n, n);
            let mut acc = ComplexMatrix::zeros(n);
            for a in coeffs {
                acc = acc + a * &blk * a.adjoint();
            }
            out.set_block(i * n, j * n, &acc);
        }
    }
    out
}

/// Evaluates `G^{(m)}(b)`.
pub fn eval_g(dist: &OVDistribution, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    dist.validate()?;
    let m = dist.amplification(b)?;
    match &dist.backend {
        Backend::ScalarEmbedded { law } => scalar_embedded_g(law, b),
        Backend::DiracB { b0 } => {
            let shifted = b - &ComplexMatrix::identity(m).kron(b0);
            shifted.inverse().map_err(|e| Error::OutsideResolvent(format!("b − b0⊗1 is not invertible ({e})")))
        }
        Backend::OvSemicircular { coeffs } => semicircular_g(coeffs, b),
        Backend::DiagonalIndependent { laws, mode, mc } => diagonal_independent_g(laws, *mode, mc.as_ref(), b),
        Backend::MatrixModel(spec) => Ok(mc_estimate_g(spec, b)?.mean),
    }
}

/// Directional derivative `−E[(b − X)^{-1} h (b − X)^{-1}]`.
pub fn eval_dg(dist: &OVDistribution, b: &ComplexMatrix, h: &ComplexMatrix) -> Result<ComplexMatrix> {
    dist.validate()?;
    let m = dist.amplification(b)?;
    if h.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: b.dim(), got: h.dim() });
    }
    match &dist.backend {
        Backend::ScalarEmbedded { law } => scalar_embedded_dg(law, b, h),
        Backend::DiracB { b0 } => {
            let r = (b - &ComplexMatrix::identity(m).kron(b0))
                .inverse()
                .map_err(|e| Error::OutsideResolvent(format!("b − b0⊗1 is not invertible ({e})")))?;
            Ok(-(&r * h * &r))
        }
        Backend::OvSemicircular { coeffs } => {
            let g = semicircular_g(coeffs, b)?;
            // dG − G η(dG) G = −G h G
            let rhs = -(&g * h * &g);
            solve_linear_map(b.dim(), &rhs, |x| x - &(&g * &eta(coeffs, x) * &g))
        }
        Backend::DiagonalIndependent { .. } => contour_derivative(b, h, |p| eval_g(dist, p)),
        Backend::MatrixModel(spec) => Ok(mc_estimate_with_derivative(spec, b, Some(h))?.1.expect("requested")),
    }
}

/// [`eval_dg`] for several directions at one point, sharing the work that
/// depends only on `b`.
pub fn eval_dg_batch(dist: &OVDistribution, b: &ComplexMatrix, hs: &[ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
    dist.validate()?;
    dist.amplification(b)?;
    if let Some(h) = hs.iter().find(|h| h.dim() != b.dim()) {
        return Err(Error::DimensionMismatch { expected: b.dim(), got: h.dim() });
    }
    match &dist.backend {
        Backend::ScalarEmbedded { law } if normal_eigen(b).is_some() => {
            let (lambdas, u) = normal_eigen(b).expect("normal");
            let kernel = divided_differences(law, &lambdas)?;
            Ok(hs
                .iter()
                .map(|h| {
                    let ht = &u.adjoint() * h * &u;
                    let inner = ComplexMatrix::from_fn(b.dim(), |i, j| kernel[i][j] * ht.get(i, j));
                    &u * &inner * u.adjoint()
                })
                .collect())
        }
        Backend::OvSemicircular { coeffs } => {
            let g = semicircular_g(coeffs, b)?;
            let lu = assemble_linear_map(b.dim(), |x| x - &(&g * &eta(coeffs, x) * &g)).lu();
            hs.iter()
                .map(|h| {
                    let rhs = nalgebra::DVector::from_vec((-(&g * h * &g)).to_row_major());
                    let sol = lu.solve(&rhs).ok_or(Error::DerivativeSingular { cond: f64::INFINITY })?;
                    ComplexMatrix::from_row_major(b.dim(), sol.as_slice())
                })
                .collect()
        }
        _ => hs.iter().map(|h| eval_dg(dist, b, h)).collect(),
    }
}

fn assemble_linear_map(dim: usize, map: impl Fn(&ComplexMatrix) -> ComplexMatrix) -> DMatrix<Complex64> {
    let size = dim * dim;
    let mut mat = DMatrix::<Complex64>::zeros(size, size);
    for col in 0..size {
        let image = map(&ComplexMatrix::unit(dim, col / dim, col % dim));
        for (row, v) in image.to_row_major().into_iter().enumerate() {
            mat[(row, col)] = v;
        }
    }
    mat
}

/// Solves `L(x) = rhs` for a linear map on `dim × dim` matrices by assembling it on matrix units.
fn solve_linear_map(
    dim: usize,
    rhs: &ComplexMatrix,
    map: impl Fn(&ComplexMatrix) -> ComplexMatrix,
) -> Result<ComplexMatrix> {
    let sol = ComplexMatrix::from_nalgebra(assemble_linear_map(dim, map))?.solve_vec(&rhs.to_row_major())?;
    ComplexMatrix::from_row_major(dim, &sol)
}

/// Derivative of a holomorphic matrix function by the trapezoidal Cauchy
/// integral `(1/2πi)∮ f(b + ζh) ζ^{-2} dζ` on a small circle.
fn contour_derivative(
    b: &ComplexMatrix,
    h: &ComplexMatrix,
    f: impl Fn(&ComplexMatrix) -> Result<ComplexMatrix>,
) -> Result<ComplexMatrix> {
    let hn = h.operator_norm();
    if hn == 0.0 {
        return Ok(ComplexMatrix::zeros(b.dim()));
    }
    let dom = neumann_dominance(b);
    let slack = if dom.q < 1.0 { (1.0 - dom.q) * dom.min_imag_diag } else { b.half_plane_margin().abs() };
    let rho = 0.25 * slack / hn;
    const POINTS: usize = 16;
    let mut acc = ComplexMatrix::zeros(b.dim());
    for k in 0..POINTS {
        let zeta = Complex64::from_polar(rho, 2.0 * std::f64::consts::PI * k as f64 / POINTS as f64);
        let v = f(&(b + &h.scale(zeta)))?;
        acc = acc + v.scale(1.0 / zeta);
    }
    Ok(acc.scale_re(1.0 / POINTS as f64))
}

/// Common eigenbasis of a normal matrix, `b = U diag(λ) U*`; `None` if `b` is not normal.
fn normal_eigen(b: &ComplexMatrix) -> Option<(Vec<Complex64>, ComplexMatrix)> {
    let scale = b.max_abs_entry().max(1e-300);
    let comm = &(b * &b.adjoint()) - &(&b.adjoint() * b);
    if comm.max_abs_entry() > NORMALITY_TOL * scale * scale {
        return None;
    }
    // A generic real combination separates the joint eigenspaces of Re b and Im b.
    let mix = &b.real_part() + &b.imag_part().scale_re(std::f64::consts::SQRT_2 - 0.5);
    let (_, u) = mix.hermitian_eigen();
    let d = &u.adjoint() * b * &u;
    let off = &d - &ComplexMatrix::from_diagonal(&d.diagonal());
    if off.max_abs_entry() > 1e-10 * scale {
        return None;
    }
    Some((d.diagonal(), u))
}

/// Checks that `b − t` is invertible for every real `t`, i.e. no eigenvalue of `b` is real.
fn check_scalar_resolvent(b: &ComplexMatrix) -> Result<()> {
    if b.half_plane_margin() > 0.0 || (-b).half_plane_margin() > 0.0 {
        return Ok(());
    }
    let scale = 1.0 + b.operator_norm();
    match b.eigenvalues()?.iter().find(|l| l.im.abs() <= 1e-10 * scale) {
        Some(l) => Err(Error::OutsideResolvent(format!("b has the (nearly) real eigenvalue {l}"))),
        None => Ok(()),
    }
}

fn scalar_embedded_g(law: &ScalarMeasure, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if let Some((lambdas, u)) = normal_eigen(b) {
        let g: Vec<Complex64> = lambdas.iter().map(|&l| scalar_g_at(law, l)).collect::<Result<_>>()?;
        return Ok(&u * &ComplexMatrix::from_diagonal(&g) * u.adjoint());
    }
    check_scalar_resolvent(b)?;
    let dim = b.dim();
    let value = law.expect(&|t: f64| {
        b.shift(c64(-t, 0.0)).inverse().unwrap_or_else(|_| ComplexMatrix::scalar(dim, c64(f64::NAN, 0.0)))
    });
    finite_or_outside(value)
}

fn scalar_embedded_dg(law: &ScalarMeasure, b: &ComplexMatrix, h: &ComplexMatrix) -> Result<ComplexMatrix> {
    if let Some((lambdas, u)) = normal_eigen(b) {
        let kernel = divided_differences(law, &lambdas)?;
        let ht = &u.adjoint() * h * &u;
        let inner = ComplexMatrix::from_fn(b.dim(), |i, j| kernel[i][j] * ht.get(i, j));
        return Ok(&u * &inner * u.adjoint());
    }
    check_scalar_resolvent(b)?;
    let dim = b.dim();
    let value = law.expect(&|t: f64| match b.shift(c64(-t, 0.0)).inverse() {
        Ok(r) => -(&r * h * &r),
        Err(_) => ComplexMatrix::scalar(dim, c64(f64::NAN, 0.0)),
    });
    finite_or_outside(value)
}

/// `[g(λ_i) − g(λ_j)]/(λ_i − λ_j)`, with `g′` on the diagonal and for near-coincident pairs.
fn divided_differences(law: &ScalarMeasure, lambdas: &[Complex64]) -> Result<Vec<Vec<Complex64>>> {
    let g: Vec<Complex64> = lambdas.iter().map(|&l| scalar_g_at(law, l)).collect::<Result<_>>()?;
    let mut out = vec![vec![Complex64::new(0.0, 0.0); lambdas.len()]; lambdas.len()];
    for (i, &li) in lambdas.iter().enumerate() {
        for (j, &lj) in lambdas.iter().enumerate() {
            let scale = 1.0 + li.norm().max(lj.norm());
            out[i][j] = if (li - lj).norm() <= 1e-7 * scale {
                law.g_derivative(0.5 * (li + lj), 1)?
            } else {
                (g[i] - g[j]) / (li - lj)
            };
        }
    }
    Ok(out)
}

fn scalar_g_at(law: &ScalarMeasure, z: Complex64) -> Result<Complex64> {
    if z.im == 0.0 {
        return Err(Error::OutsideResolvent(format!("eigenvalue {} is real", z.re)));
    }
    law.g(z)
}

fn finite_or_outside(value: ComplexMatrix) -> Result<ComplexMatrix> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::OutsideResolvent("resolvent became singular on the support".into()))
    }
}

/// Solves `G = (b − η(G))^{-1}`.
fn semicircular_g(coeffs: &[ComplexMatrix], b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if b.half_plane_margin() > 0.0 {
        return damped_fixed_point(coeffs, b);
    }
    if (-b).half_plane_margin() > 0.0 {
        return Ok(damped_fixed_point(coeffs, &b.adjoint())?.adjoint());
    }
    continuation_solve(coeffs, b)
}

fn dyson_residual(coeffs: &[ComplexMatrix], b: &ComplexMatrix, g: &ComplexMatrix) -> Result<f64> {
    let rhs = (b - &eta(coeffs, g)).inverse()?;
    Ok((g - &rhs).max_abs_entry())
}

fn damped_fixed_point(coeffs: &[ComplexMatrix], b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let mut g = b.inverse()?;
    let mut residual = f64::INFINITY;
    for _ in 0..SEMICIRCULAR_MAX_ITER {
        let next = (b - &eta(coeffs, &g)).inverse()?;
        residual = (&next - &g).max_abs_entry();
        g = (&g + &next).scale_re(0.5);
        if residual <= SEMICIRCULAR_TOL {
            return polish(coeffs, b, g);
        }
    }
    // Slow contraction near the real axis: hand over to Newton.
    newton_dyson(coeffs, b, g, 50).map_err(|_| Error::NoConvergence { iterations: SEMICIRCULAR_MAX_ITER, residual })
}

fn polish(coeffs: &[ComplexMatrix], b: &ComplexMatrix, g: ComplexMatrix) -> Result<ComplexMatrix> {
    if dyson_residual(coeffs, b, &g)? <= 1e-13 {
        return Ok(g);
    }
    newton_dyson(coeffs, b, g.clone(), 3).or(Ok(g))
}

/// Newton's method on `F(G) = (b − η(G))G − 1`.
fn newton_dyson(
    coeffs: &[ComplexMatrix],
    b: &ComplexMatrix,
    mut g: ComplexMatrix,
    max_steps: usize,
) -> Result<ComplexMatrix> {
    let dim = b.dim();
    let one = ComplexMatrix::identity(dim);
    let mut residual = f64::INFINITY;
    for _ in 0..max_steps {
        let a = b - &eta(coeffs, &g);
        let f = &(&a * &g) - &one;
        residual = f.max_abs_entry();
        if residual <= 1e-14 * (1.0 + a.max_abs_entry() * g.max_abs_entry()) {
            return Ok(g);
        }
        let step = solve_linear_map(dim, &-f, |x| &(&a * x) - &(&eta(coeffs, x) * &g))?;
        g = g + step;
        if !g.is_finite() {
            break;
        }
    }
    if dyson_residual(coeffs, b, &g).is_ok_and(|r| r <= 1e-11) {
        return Ok(g);
    }
    Err(Error::NoConvergence { iterations: max_steps, residual })
}

/// Tracks the solution along `s·b`, starting where the series in `b^{-1}` converges.
fn continuation_solve(coeffs: &[ComplexMatrix], b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = coeffs[0].dim();
    let x_bound = 2.0 * eta(coeffs, &ComplexMatrix::identity(n)).operator_norm().sqrt();
    let smin = b.min_singular_value();
    if smin == 0.0 {
        return Err(Error::OutsideResolvent("b is singular".into()));
    }
    let mut s = (8.0 * x_bound / smin).max(1.0);
    let mut g = {
        let bs = b.scale_re(s);
        let mut g = bs.inverse()?;
        for _ in 0..200 {
            g = (&bs - &eta(coeffs, &g)).inverse()?;
        }
        newton_dyson(coeffs, &bs, g, 20)?
    };
    let mut ratio = 0.8_f64;
    while s > 1.0 {
        let target = (s * ratio).max(1.0);
        let guess = g.scale_re(s / target);
        match newton_dyson(coeffs, &b.scale_re(target), guess, 12) {
            Ok(next) => {
                g = next;
                s = target;
                ratio = (ratio * 0.9).max(0.5);
            }
            Err(_) => {
                ratio = ratio.sqrt();
                if ratio > 0.999_999 {
                    return Err(Error::NoConvergence { iterations: 0, residual: f64::NAN });
                }
            }
        }
    }
    Ok(g)
}

fn diagonal_independent_g(
    laws: &[ScalarMeasure],
    mode: IndependenceMode,
    mc: Option<&McOptions>,
    b: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    if (-b).half_plane_margin() > 0.0 {
        return Ok(diagonal_independent_g(laws, mode, mc, &b.adjoint())?.adjoint());
    }
    let dom = neumann_dominance(b);
    if dom.min_imag_diag > 0.0 && dom.q < 1.0 {
        let p_max = (0..=NEUMANN_MAX_ORDER).find(|&p| neumann_tail_bound(dom, p) <= NEUMANN_TARGET_TAIL);
        if let Some(p) = p_max {
            if neumann_path_count(b, p) <= NEUMANN_MAX_PATHS {
                return Ok(matrix_g_via_neumann(b, laws, mode, p)?.0);
            }
        }
    }
    match mc {
        Some(opts) if mode == IndependenceMode::Free => Ok(mc_estimate_g(&diagonal_model(laws, opts), b)?.mean),
        _ => Err(Error::UnsupportedPoint(format!(
            "Neumann series not usable (q = {:.3}) and Monte-Carlo is not enabled for this mode",
            dom.q
        ))),
    }
}

/// Matrix model of `diag(X₁, …, X_n)` with freely independent Haar-rotated entries.
pub fn diagonal_model(laws: &[ScalarMeasure], opts: &McOptions) -> MatrixModelSpec {
    let mixer = (1..=laws.len()).map(|i| format!("E{i}_{i}*X{i}")).collect::<Vec<_>>().join(" + ");
    MatrixModelSpec {
        n: laws.len(),
        size: opts.size,
        trials: opts.trials,
        seed: opts.seed,
        vars: laws.iter().map(|l| ModelVar { law: l.clone(), realization: Realization::HaarRotated }).collect(),
        mixer,
        constants: BTreeMap::new(),
    }
}

// ---------------------------------------------------------------------------
// Matrix models

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Num(f64),
    Var(usize),
    Unit(usize, usize),
    Const(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if "+-*()".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == 'e') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            out.push(Token::Num(s.parse().map_err(|_| Error::Parse(format!("bad number '{s}' in mixer")))?));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else {
            return Err(Error::Parse(format!("unexpected character '{c}' in mixer")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' { Expr::Add(lhs.into(), rhs.into()) } else { Expr::Sub(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op('*')) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Mul(lhs.into(), rhs.into());
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        let tok = self.peek().cloned().ok_or_else(|| Error::Parse("mixer ended unexpectedly".into()))?;
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Expr::Num(v)),
            Token::Op('-') => Ok(Expr::Neg(self.factor()?.into())),
            Token::Op('(') => {
                let e = self.expr()?;
                match self.peek() {
                    Some(Token::Op(')')) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => Err(Error::Parse("missing ')' in mixer".into())),
                }
            }
            Token::Ident(name) => Ok(ident_expr(&name)),
            Token::Op(c) => Err(Error::Parse(format!("unexpected '{c}' in mixer"))),
        }
    }
}

fn ident_expr(name: &str) -> Expr {
    let index = |s: &str| s.parse::<usize>().ok().filter(|&k| k >= 1);
    if let Some(k) = name.strip_prefix('X').and_then(index) {
        return Expr::Var(k - 1);
    }
    if let Some((i, j)) = name.strip_prefix('E').and_then(|r| r.split_once('_')) {
        if let (Some(i), Some(j)) = (index(i), index(j)) {
            return Expr::Unit(i - 1, j - 1);
        }
    }
    Expr::Const(name.to_string())
}

fn parse_mixer(src: &str) -> Result<Expr> {
    let mut p = Parser { tokens: tokenize(src)?, pos: 0 };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(Error::Parse(format!("trailing input in mixer '{src}'")));
    }
    Ok(e)
}

impl Expr {
    fn check(&self, spec: &MatrixModelSpec) -> Result<()> {
        match self {
            Expr::Num(_) => Ok(()),
            Expr::Var(k) if *k < spec.vars.len() => Ok(()),
            Expr::Var(k) => Err(Error::Parse(format!("mixer uses X{} but only {} vars", k + 1, spec.vars.len()))),
            Expr::Unit(i, j) if *i < spec.n && *j < spec.n => Ok(()),
            Expr::Unit(i, j) => Err(Error::Parse(format!("matrix unit E{}_{} out of range", i + 1, j + 1))),
            Expr::Const(name) if spec.constants.contains_key(name) => Ok(()),
            Expr::Const(name) => Err(Error::Parse(format!("unknown mixer symbol '{name}'"))),
            Expr::Neg(a) => a.check(spec),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.check(spec)?;
                b.check(spec)
            }
        }
    }

    fn eval(&self, spec: &MatrixModelSpec, vars: &[ComplexMatrix]) -> ComplexMatrix {
        let (n, big_n) = (spec.n, spec.size);
        let dim = n * big_n;
        match self {
            Expr::Num(v) => ComplexMatrix::scalar(dim, c64(*v, 0.0)),
            Expr::Var(k) => ComplexMatrix::identity(n).kron(&vars[*k]),
            Expr::Unit(i, j) => ComplexMatrix::unit(n, *i, *j).kron(&ComplexMatrix::identity(big_n)),
            Expr::Const(name) => spec.constants[name].kron(&ComplexMatrix::identity(big_n)),
            Expr::Neg(a) => -a.eval(spec, vars),
            Expr::Add(a, b) => a.eval(spec, vars) + b.eval(spec, vars),
            Expr::Sub(a, b) => a.eval(spec, vars) - b.eval(spec, vars),
            Expr::Mul(a, b) => match (a.as_ref(), b.as_ref()) {
                (Expr::Num(v), other) | (other, Expr::Num(v)) => other.eval(spec, vars).scale_re(*v),
                _ => a.eval(spec, vars) * b.eval(spec, vars),
            },
        }
    }
}

/// Independent stream for `(seed, trial)`.
fn trial_rng(seed: u64, trial: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn complex_normal(rng: &mut ChaCha20Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c64(s * re, s * im)
}

/// Haar unitary from the QR factorization of a complex Ginibre matrix.
pub fn haar_unitary(big_n: usize, rng: &mut ChaCha20Rng) -> ComplexMatrix {
    let g = DMatrix::from_fn(big_n, big_n, |_, _| complex_normal(rng, 1.0));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..big_n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { c64(1.0, 0.0) };
        for i in 0..big_n {
            q[(i, j)] *= phase;
        }
    }
    ComplexMatrix::from_nalgebra(q).expect("finite")
}

/// GUE matrix normalized so that its spectrum approaches the standard semicircle.
pub fn gue(big_n: usize, rng: &mut ChaCha20Rng) -> ComplexMatrix {
    let a = DMatrix::from_fn(big_n, big_n, |_, _| complex_normal(rng, 1.0));
    let h = (&a + a.adjoint()) * c64(1.0 / (2.0 * big_n as f64).sqrt(), 0.0);
    ComplexMatrix::from_nalgebra(h).expect("finite")
}

/// `U diag(d) U*` with one matrix product.
fn conjugate_diagonal(u: &ComplexMatrix, d: &[Complex64]) -> ComplexMatrix {
    let mut ud = u.as_nalgebra().clone();
    for (j, &dj) in d.iter().enumerate() {
        ud.column_mut(j).iter_mut().for_each(|x| *x *= dj);
    }
    ComplexMatrix::from_nalgebra(ud * u.as_nalgebra().adjoint()).expect("finite")
}

/// With `rotate = false` a Haar-rotated variable stays diagonal; estimators
/// use this for the first such variable, since conjugating every variable by
/// a common `1_n ⊗ U` leaves `partial_trace` functionals unchanged in law.
fn realize(var: &ModelVar, big_n: usize, rng: &mut ChaCha20Rng, rotate: bool) -> ComplexMatrix {
    match var.realization {
        Realization::Gue => {
            let sigma = match var.law {
                ScalarMeasure::Semicircle { variance } => variance.sqrt(),
                _ => unreachable!("validated"),
            };
            gue(big_n, rng).scale_re(sigma)
        }
        Realization::HaarRotated => {
            let nodes: Vec<Complex64> = quantile_nodes(&var.law, big_n).into_iter().map(|x| c64(x, 0.0)).collect();
            if !rotate {
                return ComplexMatrix::from_diagonal(&nodes);
            }
            conjugate_diagonal(&haar_unitary(big_n, rng), &nodes)
        }
    }
}

fn sample_trial(spec: &MatrixModelSpec, expr: &Expr, trial: u64, reduced: bool) -> Result<ComplexMatrix> {
    let mut rng = trial_rng(spec.seed, trial);
    let first_haar = spec.vars.iter().position(|v| v.realization == Realization::HaarRotated);
    let vars: Vec<ComplexMatrix> = spec
        .vars
        .iter()
        .enumerate()
        .map(|(k, v)| realize(v, spec.size, &mut rng, !(reduced && Some(k) == first_haar)))
        .collect();
    let m = expr.eval(spec, &vars);
    let skew = (&m - &m.adjoint()).max_abs_entry();
    if skew > 1e-9 * (1.0 + m.max_abs_entry()) {
        return Err(Error::Invalid(format!("mixer '{}' is not self-adjoint", spec.mixer)));
    }
    Ok(m.real_part())
}

/// One Hermitian sample of dimension `n·N` for the given seed.
pub fn sample_matrix_model(spec: &MatrixModelSpec, big_n: usize, seed: u64) -> Result<ComplexMatrix> {
    let spec = MatrixModelSpec { size: big_n, seed, ..spec.clone() };
    spec.validate()?;
    sample_trial(&spec, &parse_mixer(&spec.mixer)?, 0, false)
}

/// Average of `partial_trace((b⊗1_N − 1_m⊗S)^{-1})` over seeded trials.
pub fn mc_estimate_g(spec: &MatrixModelSpec, b: &ComplexMatrix) -> Result<MCEstimate> {
    Ok(mc_estimate_with_derivative(spec, b, None)?.0)
}

type TrialOutput = (ComplexMatrix, Option<ComplexMatrix>);

fn mc_estimate_with_derivative(
    spec: &MatrixModelSpec,
    b: &ComplexMatrix,
    h: Option<&ComplexMatrix>,
) -> Result<(MCEstimate, Option<ComplexMatrix>)> {
    spec.validate()?;
    let n = spec.n;
    if !b.dim().is_multiple_of(n) {
        return Err(Error::DimensionMismatch { expected: n, got: b.dim() });
    }
    if !(b.half_plane_margin() > 0.0) {
        return Err(Error::UnsupportedPoint("Monte-Carlo estimates need Im b ≻ 0".into()));
    }
    let expr = parse_mixer(&spec.mixer)?;
    let outputs: Vec<Result<TrialOutput>> =
        (0..spec.trials as u64).into_par_iter().map(|t| trial_resolvent(spec, &expr, b, h, t)).collect();
    let outputs: Vec<TrialOutput> = outputs.into_iter().collect::<Result<_>>()?;
    let means: Vec<ComplexMatrix> = outputs.iter().map(|o| o.0.clone()).collect();
    let (mean, stderr) = mean_and_stderr(&means);
    let dg = h.map(|_| {
        let ds: Vec<ComplexMatrix> = outputs.iter().map(|o| o.1.clone().expect("requested")).collect();
        mean_and_stderr(&ds).0
    });
    Ok((MCEstimate { mean, stderr, trials: spec.trials }, dg))
}

fn trial_resolvent(
    spec: &MatrixModelSpec,
    expr: &Expr,
    b: &ComplexMatrix,
    h: Option<&ComplexMatrix>,
    trial: u64,
) -> Result<TrialOutput> {
    let s = sample_trial(spec, expr, trial, true)?;
    let (n, big_n) = (spec.n, spec.size);
    let m = b.dim() / n;
    if n == 1 {
        // Spectral shortcut: the partial trace only sees the eigenvalues.
        let ev = s.hermitian_eigenvalues();
        let mut g = ComplexMatrix::zeros(m);
        let mut dg = h.map(|_| ComplexMatrix::zeros(m));
        for &lambda in &ev {
            let r = b.shift(c64(-lambda, 0.0)).inverse()?;
            if let (Some(acc), Some(h)) = (dg.as_mut(), h) {
                *acc = &*acc - &(&r * h * &r);
            }
            g = g + r;
        }
        let w = 1.0 / big_n as f64;
        return Ok((g.scale_re(w), dg.map(|d| d.scale_re(w))));
    }
    let big_b = b.kron(&ComplexMatrix::identity(big_n));
    let r = (&big_b - &ComplexMatrix::identity(m).kron(&s)).inverse()?;
    let g = r.partial_trace(m * n, big_n)?;
    let dg = match h {
        Some(h) => {
            let hb = h.kron(&ComplexMatrix::identity(big_n));
            Some((-(&r * &hb * &r)).partial_trace(m * n, big_n)?)
        }
        None => None,
    };
    Ok((g, dg))
}

fn mean_and_stderr(samples: &[ComplexMatrix]) -> (ComplexMatrix, f64) {
    let k = samples.len();
    let dim = samples[0].dim();
    let mut mean = ComplexMatrix::zeros(dim);
    for s in samples {
        mean = mean + s;
    }
    let mean = mean.scale_re(1.0 / k as f64);
    let mut stderr = 0.0_f64;
    for i in 0..dim {
        for j in 0..dim {
            let mu = mean.get(i, j);
            let (mut vr, mut vi) = (0.0, 0.0);
            for s in samples {
                let d = s.get(i, j) - mu;
                vr += d.re * d.re;
                vi += d.im * d.im;
            }
            let denom = ((k - 1) * k) as f64;
            stderr = stderr.max((vr / denom).sqrt()).max((vi / denom).sqrt());
        }
    }
    (mean, stderr)
}

/// Monte-Carlo estimate of a scalar mixed resolvent moment with freely
/// independent Haar-rotated variables; returns `(mean, stderr)`.
pub fn mc_mixed_moment(letters: &[Letter], laws: &[ScalarMeasure], opts: &McOptions) -> Result<(Complex64, f64)> {
    if opts.size < 2 || opts.trials < 2 {
        return Err(Error::Invalid("MC needs N ≥ 2 and trials ≥ 2".into()));
    }
    let big_n = opts.size;
    let values: Vec<Result<Complex64>> = (0..opts.trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(opts.seed, t);
            // The first variable stays diagonal; the trace is conjugation invariant.
            let spectra: Vec<(Vec<f64>, Option<ComplexMatrix>)> = laws
                .iter()
                .enumerate()
                .map(|(k, law)| (quantile_nodes(law, big_n), (k > 0).then(|| haar_unitary(big_n, &mut rng))))
                .collect();
            let mut prod = ComplexMatrix::identity(big_n);
            for l in letters {
                let (nodes, u) = &spectra[l.var];
                let d: Vec<Complex64> = nodes.iter().map(|&x| 1.0 / (l.z - x)).collect();
                prod = match u {
                    Some(u) => prod * conjugate_diagonal(u, &d),
                    None => prod * ComplexMatrix::from_diagonal(&d),
                };
            }
            Ok(prod.trace() / big_n as f64)
        })
        .collect();
    let values: Vec<Complex64> = values.into_iter().collect::<Result<_>>()?;
    let samples: Vec<ComplexMatrix> = values.iter().map(|&v| ComplexMatrix::scalar(1, v)).collect();
    let (mean, stderr) = mean_and_stderr(&samples);
    Ok((mean.get(0, 0), stderr))
}
