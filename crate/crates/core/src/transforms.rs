//! The resolvent domain `Ω(B)`, the map `K(w) = G(w^{-1})`, Bloch-certified
//! local inversion of `G`, and the R-transform.
//!
//! Inversion works on the `K` side: a ball `B_r(c)` around an alternating base
//! point `c = d_n(λ)` on which `K` is biholomorphic onto a set covering
//! `B_P(K(c))`. For a target `w` there `K(v) = w` has a unique solution
//! `v ∈ B_r(c)` and `G^{⟨−1⟩}(w) = v^{-1}`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{c64, ComplexMatrix, CONDITION_CAP};
use crate::ovdist::{eval_dg_batch, eval_g, OVDistribution};

const A_SAFETY: f64 = 0.9;
const M_SAFETY: f64 = 1.5;
const INJECTIVITY_PAIRS: usize = 200;
const NEWTON_MAX_STEPS: usize = 100;
const NEWTON_TOL: f64 = 1e-11;
const DEFAULT_SEED: u64 = 0x0b10c4;

/// An accepted point `b = D + T` of `Ω`: `D` block diagonal with odd blocks
/// in the upper and even blocks in the lower half plane.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaPoint {
    pub half_dim: usize,
    pub block_size: usize,
    pub diag_blocks: Vec<ComplexMatrix>,
    pub perturbation: ComplexMatrix,
    /// `min_j λ_min(±Im b_j)`.
    pub block_margin: f64,
    /// `block_margin − ‖T‖`.
    pub margin: f64,
}

impl OmegaPoint {
    pub fn matrix(&self) -> ComplexMatrix {
        let mut d = self.perturbation.clone();
        let s = self.block_size;
        for (j, blk) in self.diag_blocks.iter().enumerate() {
            let cur = d.block(j * s, j * s, s);
            d.set_block(j * s, j * s, &(cur + blk));
        }
        d
    }

    /// Bound `1/margin = (1/r₀)(1 − ‖T‖/r₀)^{-1}` on `‖(a⊗1 − b)^{-1}‖` for self-adjoint `a`.
    pub fn resolvent_bound(&self) -> f64 {
        1.0 / self.margin
    }
}

/// Decomposes `b` into the alternating block pattern (blocks of `block_size`)
/// plus a perturbation and accepts it when the perturbation is smaller than
/// every block's half-plane margin.
pub fn omega_membership(b: &ComplexMatrix, n: usize, block_size: usize) -> Result<OmegaPoint> {
    let s = block_size;
    if n == 0 || s == 0 || b.dim() != 2 * n * s {
        return Err(Error::DimensionMismatch { expected: 2 * n * s, got: b.dim() });
    }
    let mut blocks = Vec::with_capacity(2 * n);
    let mut perturbation = b.clone();
    let mut block_margin = f64::INFINITY;
    for j in 0..2 * n {
        let blk = b.block(j * s, j * s, s);
        let m = if j % 2 == 0 { blk.half_plane_margin() } else { (-&blk).half_plane_margin() };
        if !(m > 0.0) {
            return Err(Error::WrongPattern { block: j + 1 });
        }
        block_margin = block_margin.min(m);
        perturbation.set_block(j * s, j * s, &ComplexMatrix::zeros(s));
        blocks.push(blk);
    }
    let t = perturbation.operator_norm();
    if !(t < block_margin) {
        return Err(Error::PerturbationTooLarge { norm: t, margin: block_margin });
    }
    Ok(OmegaPoint {
        half_dim: n,
        block_size: s,
        diag_blocks: blocks,
        perturbation,
        block_margin,
        margin: block_margin - t,
    })
}

/// `d_n(λ)`: `2n` diagonal blocks `±iλ·1` of size `base_dim`, signs alternating from `+`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasePoint {
    pub n: usize,
    pub base_dim: usize,
    pub lambda: f64,
    pub matrix: ComplexMatrix,
}

impl BasePoint {
    pub fn new(n: usize, base_dim: usize, lambda: f64) -> Result<Self> {
        if n == 0 || base_dim == 0 || !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Invalid(format!("base point needs n, base_dim ≥ 1 and λ > 0 (got λ = {lambda})")));
        }
        let diag: Vec<Complex64> = (0..2 * n * base_dim)
            .map(|k| if (k / base_dim).is_multiple_of(2) { c64(0.0, lambda) } else { c64(0.0, -lambda) })
            .collect();
        Ok(Self { n, base_dim, lambda, matrix: ComplexMatrix::from_diagonal(&diag) })
    }
}

/// Lays an `s×s` lower-half-plane value `w` out in the alternating pattern
/// `w* ⊕ w ⊕ w* ⊕ w …` (`2n` blocks), matching `K(d_n(λ)) ≈ d_n(λ)`.
pub fn alternating_target(w: &ComplexMatrix, n: usize) -> ComplexMatrix {
    let s = w.dim();
    let mut out = ComplexMatrix::zeros(2 * n * s);
    let wa = w.adjoint();
    for j in 0..2 * n {
        out.set_block(j * s, j * s, if j % 2 == 0 { &wa } else { w });
    }
    out
}

/// `K(w) = G(w^{-1})`.
pub fn k_map(dist: &OVDistribution, w: &ComplexMatrix) -> Result<ComplexMatrix> {
    eval_g(dist, &w.inverse()?)
}

/// Jacobian of `K` at `v` on the row-major matrix-unit basis:
/// `DK(v)[h] = DG(v^{-1})[−v^{-1} h v^{-1}]`.
pub fn k_jacobian(dist: &OVDistribution, v: &ComplexMatrix) -> Result<DMatrix<Complex64>> {
    let dim = v.dim();
    let vi = v.inverse()?;
    let dirs: Vec<ComplexMatrix> =
        (0..dim * dim).map(|k| -(&vi * &ComplexMatrix::unit(dim, k / dim, k % dim) * &vi)).collect();
    let cols = eval_dg_batch(dist, &vi, &dirs)?;
    let mut jac = DMatrix::zeros(dim * dim, dim * dim);
    for (k, col) in cols.iter().enumerate() {
        for (row, x) in col.to_row_major().into_iter().enumerate() {
            jac[(row, k)] = x;
        }
    }
    Ok(jac)
}

/// Bloch constants `r = R²a/(4M)` and `P = R²a²/(8M)`.
pub fn bloch_constants(big_r: f64, a: f64, m: f64) -> (f64, f64) {
    (big_r * big_r * a / (4.0 * m), big_r * big_r * a * a / (8.0 * m))
}

/// A ball `B_r(center)` on which `K` is certified injective, covering `B_P(K(center))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedBall {
    pub center: ComplexMatrix,
    pub image_center: ComplexMatrix,
    pub lambda: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    pub a: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub r: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub injectivity_pairs: usize,
}

/// Certifies `K` around a base point with the default sampling seed.
pub fn bloch_certify(dist: &OVDistribution, center: &BasePoint, big_r: f64) -> Result<CertifiedBall> {
    bloch_certify_seeded(dist, center, big_r, DEFAULT_SEED)
}

/// `a` from the smallest singular value of the Jacobian (converted to the
/// operator norm, times 0.9), `M` from a Latin-hypercube sample of the sphere
/// `‖y‖ = R` (times 1.5), then an injectivity spot check on `B_r`.
pub fn bloch_certify_seeded(dist: &OVDistribution, center: &BasePoint, big_r: f64, seed: u64) -> Result<CertifiedBall> {
    if !(big_r > 0.0) || big_r > center.lambda / 2.0 * (1.0 + 1e-12) {
        return Err(Error::Invalid(format!("radius {big_r} must lie in (0, λ/2]")));
    }
    if center.base_dim != dist.base_dim {
        return Err(Error::DimensionMismatch { expected: dist.base_dim, got: center.base_dim });
    }
    let c = &center.matrix;
    let dim = c.dim();
    let kc = k_map(dist, c)?;

    let sv = k_jacobian(dist, c)?.singular_values();
    let (smin, smax) = sv.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if !(smin > 0.0) || smax / smin > CONDITION_CAP {
        return Err(Error::DerivativeSingular { cond: smax / smin });
    }
    // ‖x‖_op ≤ ‖x‖_F ≤ √dim ‖x‖_op
    let a = A_SAFETY * smin / (dim as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sup = 0.0_f64;
    for y in sphere_sample(dim, big_r, &mut rng, c) {
        sup = sup.max((&k_map(dist, &(c + &y))? - &kc).operator_norm());
    }
    let m = M_SAFETY * sup;
    if !(m > 0.0) {
        return Err(Error::DerivativeSingular { cond: f64::INFINITY });
    }
    let (r, p) = bloch_constants(big_r, a, m);
    if !(r > 0.0 && r <= big_r && p <= m) {
        return Err(Error::Invalid(format!("inconsistent Bloch constants r = {r}, P = {p}")));
    }

    for _ in 0..INJECTIVITY_PAIRS {
        let x = c + &random_in_ball(dim, r, &mut rng);
        let y = c + &random_in_ball(dim, r, &mut rng);
        let gap = (&k_map(dist, &x)? - &k_map(dist, &y)?).operator_norm();
        if !(gap > 1e-6 * (&x - &y).operator_norm()) {
            return Err(Error::Invalid("injectivity spot check failed inside the certified ball".into()));
        }
    }

    Ok(CertifiedBall {
        center: c.clone(),
        image_center: kc,
        lambda: center.lambda,
        big_r,
        a,
        m,
        r,
        p,
        injectivity_pairs: INJECTIVITY_PAIRS,
    })
}

/// Latin-hypercube directions in the `2·dim²` real coordinates, scaled to
/// operator norm `R`, plus the axis directions `±R`, `±iR` and `±R c/‖c‖`.
fn sphere_sample(dim: usize, big_r: f64, rng: &mut ChaCha8Rng, c: &ComplexMatrix) -> Vec<ComplexMatrix> {
    let coords = 2 * dim * dim;
    let count = coords;
    let strata: Vec<Vec<usize>> = (0..coords)
        .map(|_| {
            let mut p: Vec<usize> = (0..count).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let mut out: Vec<ComplexMatrix> = (0..count)
        .map(|s| {
            let x: Vec<f64> =
                (0..coords).map(|k| 2.0 * (strata[k][s] as f64 + rng.random::<f64>()) / count as f64 - 1.0).collect();
            let y = ComplexMatrix::from_fn(dim, |i, j| {
                let k = 2 * (i * dim + j);
                c64(x[k], x[k + 1])
            });
            normalized(&y, big_r)
        })
        .collect();
    let unit = ComplexMatrix::identity(dim);
    for dir in [unit.clone(), unit.scale(c64(0.0, 1.0)), c.clone()] {
        out.push(normalized(&dir, big_r));
        out.push(normalized(&-dir, big_r));
    }
    out
}

fn normalized(y: &ComplexMatrix, radius: f64) -> ComplexMatrix {
    let n = y.operator_norm();
    if n == 0.0 {
        ComplexMatrix::zeros(y.dim())
    } else {
        y.scale_re(radius / n)
    }
}

fn random_in_ball(dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> ComplexMatrix {
    let y = ComplexMatrix::from_fn(dim, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    normalized(&y, radius * rng.random::<f64>())
}

/// Solves `K(v) = target` by Newton's method from `guess` (default: the ball
/// center), halving steps that would leave `B_r(center)`. Returns `v`.
pub fn invert_k(
    dist: &OVDistribution,
    target: &ComplexMatrix,
    ball: &CertifiedBall,
    guess: Option<&ComplexMatrix>,
) -> Result<ComplexMatrix> {
    let dim = ball.center.dim();
    if target.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: target.dim() });
    }
    let mut v = guess.cloned().unwrap_or_else(|| ball.center.clone());
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_STEPS {
        let f = &k_map(dist, &v)? - target;
        residual = f.operator_norm();
        if residual <= NEWTON_TOL {
            return Ok(polish(dist, target, ball, v, residual));
        }
        let jac = k_jacobian(dist, &v)?;
        let rhs = nalgebra::DVector::from_vec((-&f).to_row_major());
        let step = jac.lu().solve(&rhs).ok_or(Error::DerivativeSingular { cond: f64::INFINITY })?;
        let step = ComplexMatrix::from_row_major(dim, step.as_slice())?;
        let mut t = 1.0;
        loop {
            let cand = &v + &step.scale_re(t);
            let dist_to_center = (&cand - &ball.center).operator_norm();
            if dist_to_center < ball.r {
                v = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-6 {
                return Err(Error::LeftCertifiedBall { distance: dist_to_center, radius: ball.r });
            }
        }
    }
    Err(Error::NoConvergence { iterations: NEWTON_MAX_STEPS, residual })
}

/// One more Newton step, kept only if it lowers the residual.
fn polish(
    dist: &OVDistribution,
    target: &ComplexMatrix,
    ball: &CertifiedBall,
    v: ComplexMatrix,
    residual: f64,
) -> ComplexMatrix {
    let step = (|| {
        let f = &k_map(dist, &v).ok()? - target;
        let rhs = nalgebra::DVector::from_vec((-&f).to_row_major());
        let step = k_jacobian(dist, &v).ok()?.lu().solve(&rhs)?;
        ComplexMatrix::from_row_major(v.dim(), step.as_slice()).ok()
    })();
    let Some(step) = step else { return v };
    let cand = &v + &step;
    let better = (&cand - &ball.center).operator_norm() < ball.r
        && k_map(dist, &cand).map(|k| (&k - target).operator_norm() < residual).unwrap_or(false);
    if better {
        cand
    } else {
        v
    }
}

/// `G^{⟨−1⟩}(target) = v^{-1}` where `v ∈ B_r(center)` solves `K(v) = target`.
/// `guess` is a starting point on the `K` side.
pub fn invert_g(
    dist: &OVDistribution,
    target: &ComplexMatrix,
    ball: &CertifiedBall,
    guess: Option<&ComplexMatrix>,
) -> Result<ComplexMatrix> {
    invert_k(dist, target, ball, guess)?.inverse()
}

/// `R(w) = G^{⟨−1⟩}(w) − w^{-1}`.
pub fn r_transform(dist: &OVDistribution, w: &ComplexMatrix, ball: &CertifiedBall) -> Result<ComplexMatrix> {
    Ok(&invert_g(dist, w, ball, None)? - &w.inverse()?)
}

/// Compares `∫ (B − T(t))^{-1} dμ(t)`, `T(t) = diag((t−i)^{-1}, (t+i)^{-1}) ⊗ 1`,
/// with `B^{-1} − B^{-1} G(B₀ + B^{-1}) B^{-1}`, `B₀ = diag(i, −i) ⊗ 1`.
/// Returns the operator-norm discrepancy.
pub fn block_resolvent_identity_check(dist: &OVDistribution, b: &ComplexMatrix) -> Result<f64> {
    let law = match &dist.backend {
        crate::ovdist::Backend::ScalarEmbedded { law } => law,
        _ => return Err(Error::Invalid("block identity needs a scalar-embedded distribution".into())),
    };
    let dim = b.dim();
    if !dim.is_multiple_of(2) || !dim.is_multiple_of(dist.base_dim) {
        return Err(Error::DimensionMismatch { expected: 2 * dist.base_dim, got: dim });
    }
    let half = dim / 2;
    let b_inv = b.inverse()?;
    let norm = b_inv.operator_norm();
    if !(norm < 1.0) {
        return Err(Error::BNotDominant { norm });
    }
    let i = c64(0.0, 1.0);
    let signs = |t: f64| {
        ComplexMatrix::from_diagonal(
            &(0..dim).map(|k| if k < half { 1.0 / (t - i) } else { 1.0 / (t + i) }).collect::<Vec<_>>(),
        )
    };
    let lhs = law
        .expect(&|t: f64| (b - &signs(t)).inverse().unwrap_or_else(|_| ComplexMatrix::scalar(dim, c64(f64::NAN, 0.0))));
    if !lhs.is_finite() {
        return Err(Error::OutsideResolvent("B − T(t) became singular".into()));
    }
    let b0 = ComplexMatrix::from_diagonal(&(0..dim).map(|k| if k < half { i } else { -i }).collect::<Vec<_>>());
    let g = eval_g(dist, &(&b0 + &b_inv))?;
    let rhs = &b_inv - &(&b_inv * &g * &b_inv);
    Ok((&lhs - &rhs).operator_norm())
}

/// Seeded random `dim×dim` matrices scaled so that `‖B^{-1}‖ = inv_norm`,
/// the inputs of the block resolvent identity check.
pub fn sample_block_points(dim: usize, count: usize, inv_norm: f64, seed: u64) -> Vec<ComplexMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let raw = ComplexMatrix::from_fn(dim, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let smin = raw.min_singular_value();
        if smin > 1e-3 {
            out.push(raw.scale_re(1.0 / (inv_norm * smin)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::ScalarMeasure;

    #[test]
    fn omega_examples() {
        let d = BasePoint::new(1, 1, 0.7).unwrap();
        let p = omega_membership(&d.matrix, 1, 1).unwrap();
        assert!((p.margin - 0.7).abs() < 1e-15);

        let mut b = ComplexMatrix::from_diagonal(&[c64(0.0, 1.0), c64(0.0, -1.0)]);
        b.set(0, 1, c64(0.5, 0.0));
        b.set(1, 0, c64(0.5, 0.0));
        let p = omega_membership(&b, 1, 1).unwrap();
        assert!((p.margin - 0.5).abs() < 1e-14);
        assert!((&p.matrix() - &b).max_abs_entry() < 1e-15);

        let bad = ComplexMatrix::from_diagonal(&[c64(0.0, 1.0), c64(0.0, 1.0)]);
        assert_eq!(omega_membership(&bad, 1, 1), Err(Error::WrongPattern { block: 2 }));
    }

    #[test]
    fn base_point_pattern() {
        let d = BasePoint::new(2, 2, 0.5).unwrap();
        let diag = d.matrix.diagonal();
        let signs: Vec<f64> = diag.iter().map(|z| z.im.signum()).collect();
        assert_eq!(signs, vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        assert!(d.matrix.is_diagonal());
    }

    #[test]
    fn bloch_plug_in() {
        assert_eq!(bloch_constants(1.0, 1.0, 1.0), (0.25, 0.125));
    }

    #[test]
    fn k_map_examples() {
        let w = ComplexMatrix::from_rows(&[vec![c64(0.1, 0.5), c64(0.2, 0.0)], vec![c64(0.0, 0.1), c64(0.3, 0.8)]])
            .unwrap();
        let dirac = OVDistribution::dirac(ComplexMatrix::zeros(2)).unwrap();
        assert!((&k_map(&dirac, &w).unwrap() - &w).max_abs_entry() < 1e-14);

        let b = ComplexMatrix::from_diagonal(&[c64(0.2, 1.0), c64(-0.3, 2.0)]);
        let cauchy = OVDistribution::scalar_embedded(2, ScalarMeasure::standard_cauchy()).unwrap();
        let expect = b.shift(c64(0.0, 1.0)).inverse().unwrap();
        assert!((&k_map(&cauchy, &b.inverse().unwrap()).unwrap() - &expect).max_abs_entry() < 1e-12);
    }

    #[test]
    fn dirac_inversion() {
        let c = c64(0.4, 0.0);
        let dist = OVDistribution::dirac(ComplexMatrix::scalar(1, c)).unwrap();
        let base = BasePoint::new(1, 1, 0.5).unwrap();
        let ball = bloch_certify(&dist, &base, 0.25).unwrap();
        assert!(ball.r > 0.0 && ball.p > 0.0);
        let target = &ball.image_center
            + &ComplexMatrix::from_diagonal(&[c64(0.3, 0.1), c64(-0.2, 0.2)]).scale_re(0.5 * ball.p / 0.4);
        let b = invert_g(&dist, &target, &ball, None).unwrap();
        let expect = target.inverse().unwrap().shift(c);
        assert!((&b - &expect).max_abs_entry() < 1e-9);
        let r = r_transform(&dist, &target, &ball).unwrap();
        assert!((&r - &ComplexMatrix::scalar(2, c)).max_abs_entry() < 1e-9);
    }

    #[test]
    fn semicircle_inverse_example() {
        // G^{⟨−1⟩}(−i/3) = 8i/3, certified at λ = 3/8 where K(d) = diag(i/3, −i/3).
        let dist = OVDistribution::scalar_embedded(1, ScalarMeasure::semicircle(1.0)).unwrap();
        let base = BasePoint::new(1, 1, 3.0 / 8.0).unwrap();
        let ball = bloch_certify(&dist, &base, 3.0 / 16.0).unwrap();
        let target = alternating_target(&ComplexMatrix::scalar(1, c64(0.0, -1.0 / 3.0)), 1);
        assert!((&ball.image_center - &target).operator_norm() < 1e-12);
        let b = invert_g(&dist, &target, &ball, None).unwrap();
        assert!((b.get(1, 1) - c64(0.0, 8.0 / 3.0)).norm() < 1e-9);
        assert!((b.get(0, 0) - c64(0.0, -8.0 / 3.0)).norm() < 1e-9);
    }

    #[test]
    fn block_identity_point_mass() {
        let dist = OVDistribution::scalar_embedded(1, ScalarMeasure::point_mass(0.0)).unwrap();
        let b = ComplexMatrix::scalar(2, c64(0.0, 3.0));
        assert!(block_resolvent_identity_check(&dist, &b).unwrap() <= 1e-12);
        let small = ComplexMatrix::scalar(2, c64(0.0, 0.5));
        assert!(matches!(block_resolvent_identity_check(&dist, &small), Err(Error::BNotDominant { .. })));
    }
}
