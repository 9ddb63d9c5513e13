//! Free additive convolution through R-transform summation, its verification,
//! and the truncation-convergence harness for unbounded laws.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{truncate, ScalarMeasure};
use crate::numerics::{c64, ComplexMatrix};
use crate::ovdist::{eval_g, mc_estimate_g, Backend, MatrixModelSpec, OVDistribution};
use crate::transforms::{bloch_certify, invert_k, k_jacobian, k_map, BasePoint, CertifiedBall};

const SUM_NEWTON_STEPS: usize = 100;
const SUM_TOL: f64 = 1e-11;

/// Two distributions over the same `B` with balls certified at a common base
/// point and radius; all balls carry the smallest of the radii. The optional
/// `sum` is an independent model of `X + Y` used for verification.
#[derive(Debug, Clone)]
pub struct ConvolutionTask {
    pub x: OVDistribution,
    pub y: OVDistribution,
    pub sum: Option<OVDistribution>,
    pub ball_x: CertifiedBall,
    pub ball_y: CertifiedBall,
    pub ball_sum: Option<CertifiedBall>,
    pub eval_points: Vec<ComplexMatrix>,
}

/// Certifies every distribution at `(base, R)` and shrinks all balls to the common `min r`, `min P`.
pub fn joint_balls(dists: &[&OVDistribution], base: &BasePoint, big_r: f64) -> Result<Vec<CertifiedBall>> {
    let mut balls: Vec<CertifiedBall> = dists.iter().map(|d| bloch_certify(d, base, big_r)).collect::<Result<_>>()?;
    let r = balls.iter().map(|b| b.r).fold(f64::INFINITY, f64::min);
    let p = balls.iter().map(|b| b.p).fold(f64::INFINITY, f64::min);
    for b in &mut balls {
        b.r = r;
        b.p = p;
    }
    Ok(balls)
}

impl ConvolutionTask {
    pub fn new(
        x: OVDistribution,
        y: OVDistribution,
        sum: Option<OVDistribution>,
        base: &BasePoint,
        big_r: f64,
    ) -> Result<Self> {
        for d in std::iter::once(&y).chain(sum.as_ref()) {
            if d.base_dim != x.base_dim {
                return Err(Error::DimensionMismatch { expected: x.base_dim, got: d.base_dim });
            }
        }
        let mut dists = vec![&x, &y];
        dists.extend(sum.as_ref());
        let mut balls = joint_balls(&dists, base, big_r)?.into_iter();
        let ball_x = balls.next().expect("ball for X");
        let ball_y = balls.next().expect("ball for Y");
        let ball_sum = balls.next();
        Ok(Self { x, y, sum, ball_x, ball_y, ball_sum, eval_points: Vec::new() })
    }

    pub fn with_points(mut self, points: Vec<ComplexMatrix>) -> Self {
        self.eval_points = points;
        self
    }

    /// The task with `X` and `Y` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            x: self.y.clone(),
            y: self.x.clone(),
            ball_x: self.ball_y.clone(),
            ball_y: self.ball_x.clone(),
            ..self.clone()
        }
    }

    /// `count` seeded points within `P/2` of the mean image center. Points
    /// are kept only if every distribution inverts them inside its `B_r`, which
    /// the injectivity check makes unique even where the image balls differ.
    pub fn sample_points(&self, count: usize, seed: u64) -> Result<Vec<ComplexMatrix>> {
        let mut pairs = vec![(&self.x, &self.ball_x), (&self.y, &self.ball_y)];
        if let (Some(s), Some(b)) = (&self.sum, &self.ball_sum) {
            pairs.push((s, b));
        }
        let mut mid = ComplexMatrix::zeros(self.ball_x.center.dim());
        for (_, ball) in &pairs {
            mid = &mid + &ball.image_center;
        }
        let mid = mid.scale_re(1.0 / pairs.len() as f64);
        let dim = mid.dim();
        let radius = 0.5 * self.ball_x.p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..20 * count {
            if out.len() == count {
                break;
            }
            let y = ComplexMatrix::from_fn(dim, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let w = &mid + &y.scale_re(radius * rng.random::<f64>() / y.operator_norm());
            if pairs.iter().all(|(d, ball)| invert_k(d, &w, ball, None).is_ok()) {
                out.push(w);
            }
        }
        if out.len() < count {
            return Err(Error::Invalid(format!(
                "only {} of {count} sampled points invert inside every certified ball",
                out.len()
            )));
        }
        Ok(out)
    }

    /// `R_X(w) + R_Y(w)`.
    pub fn r_sum_at(&self, w: &ComplexMatrix) -> Result<ComplexMatrix> {
        let bx = invert_k(&self.x, w, &self.ball_x, None)?.inverse()?;
        let by = invert_k(&self.y, w, &self.ball_y, None)?.inverse()?;
        Ok(&(&bx + &by) - &w.inverse()?.scale_re(2.0))
    }
}

/// A `λ` whose base point makes `b` (in alternating layout) reachable for
/// `X ⊞ Y`: minimizes `‖c^{-1}_X + c^{-1}_Y − w_c^{-1} − b‖` over a geometric
/// grid, where `w_c` is the mean image of the base point `c`.
pub fn suggest_lambda(x: &OVDistribution, y: &OVDistribution, b: &ComplexMatrix, n: usize) -> Result<f64> {
    let lambda0 = 1.0 / b.operator_norm().max(1e-12);
    let mut best = (f64::INFINITY, lambda0);
    for k in -80..=80 {
        let lambda = lambda0 * 1.03f64.powi(k);
        let base = BasePoint::new(n, x.base_dim, lambda)?;
        let ci = base.matrix.inverse()?;
        let (Ok(kx), Ok(ky)) = (k_map(x, &base.matrix), k_map(y, &base.matrix)) else { continue };
        let w = (&kx + &ky).scale_re(0.5);
        let Ok(wi) = w.inverse() else { continue };
        // R is roughly constant near the base point: R(w) ≈ c^{-1} − K(c)^{-1}.
        let bx = &ci + &(&wi - &kx.inverse()?);
        let by = &ci + &(&wi - &ky.inverse()?);
        let miss = (&(&(&bx + &by) - &wi) - b).operator_norm();
        if miss < best.0 {
            best = (miss, lambda);
        }
    }
    Ok(best.1)
}

/// `R_X + R_Y` on the task's evaluation points.
pub fn r_sum(task: &ConvolutionTask) -> Result<Vec<ComplexMatrix>> {
    task.eval_points.par_iter().map(|w| task.r_sum_at(w)).collect()
}

/// `G^{⟨−1⟩}(w) = v^{-1}` with `K(v) = w`, and the Jacobian of `w ↦ G^{⟨−1⟩}(w)`.
fn inverse_and_jacobian(
    dist: &OVDistribution,
    w: &ComplexMatrix,
    ball: &CertifiedBall,
    guess: &ComplexMatrix,
) -> Result<(ComplexMatrix, ComplexMatrix, DMatrix<Complex64>)> {
    let v = invert_k(dist, w, ball, Some(guess))?;
    let vi = v.inverse()?;
    let dim = v.dim();
    let lu = k_jacobian(dist, &v)?.lu();
    let mut jac = DMatrix::zeros(dim * dim, dim * dim);
    for k in 0..dim * dim {
        let mut e = nalgebra::DVector::zeros(dim * dim);
        e[k] = c64(1.0, 0.0);
        let dv = lu.solve(&e).ok_or(Error::DerivativeSingular { cond: f64::INFINITY })?;
        let dv = ComplexMatrix::from_row_major(dim, dv.as_slice())?;
        let col = -(&vi * &dv * &vi);
        for (row, x) in col.to_row_major().into_iter().enumerate() {
            jac[(row, k)] = x;
        }
    }
    Ok((v, vi, jac))
}

/// `G_{X⊞Y}(b)`: the `w` with `R_X(w) + R_Y(w) + w^{-1} = b`, by Newton's
/// method from the image centers.
pub fn eval_g_of_sum(task: &ConvolutionTask, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let dim = task.ball_x.center.dim();
    if b.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: b.dim() });
    }
    let mut w = (&task.ball_x.image_center + &task.ball_y.image_center).scale_re(0.5);
    let (mut vx, mut vy) = (task.ball_x.center.clone(), task.ball_y.center.clone());
    let mut residual = f64::INFINITY;
    for _ in 0..SUM_NEWTON_STEPS {
        let (nvx, bx, jx) = inverse_and_jacobian(&task.x, &w, &task.ball_x, &vx)?;
        let (nvy, by, jy) = inverse_and_jacobian(&task.y, &w, &task.ball_y, &vy)?;
        (vx, vy) = (nvx, nvy);
        let wi = w.inverse()?;
        let h = &(&(&bx + &by) - &wi) - b;
        residual = h.operator_norm();
        if residual <= SUM_TOL {
            return Ok(w);
        }
        let mut jac = jx + jy;
        for k in 0..dim * dim {
            let col = &wi * &ComplexMatrix::unit(dim, k / dim, k % dim) * &wi;
            for (row, x) in col.to_row_major().into_iter().enumerate() {
                jac[(row, k)] += x;
            }
        }
        let rhs = nalgebra::DVector::from_vec((-&h).to_row_major());
        let step = jac.lu().solve(&rhs).ok_or(Error::DerivativeSingular { cond: f64::INFINITY })?;
        let step = ComplexMatrix::from_row_major(dim, step.as_slice())?;
        // Halve steps whose preimages would leave the certified balls.
        let mut t = 1.0;
        loop {
            let cand = &w + &step.scale_re(t);
            let ok = invert_k(&task.x, &cand, &task.ball_x, Some(&vx)).is_ok()
                && invert_k(&task.y, &cand, &task.ball_y, Some(&vy)).is_ok();
            if ok {
                w = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-6 {
                return Err(Error::NoConvergence { iterations: SUM_NEWTON_STEPS, residual });
            }
        }
    }
    Err(Error::NoConvergence { iterations: SUM_NEWTON_STEPS, residual })
}

#[derive(Debug, Clone, Serialize)]
pub struct AdditivityReport {
    pub points: usize,
    pub max_discrepancy: f64,
    pub discrepancies: Vec<f64>,
}

/// `max_w ‖R_X(w) + R_Y(w) − R_{X+Y}(w)‖` over the evaluation points, with
/// `X + Y` given by the task's independent `sum` model.
pub fn verify_additivity(task: &ConvolutionTask) -> Result<AdditivityReport> {
    let (Some(sum), Some(ball_s)) = (&task.sum, &task.ball_sum) else {
        return Err(Error::Invalid("additivity check needs an independent model of X + Y".into()));
    };
    let discrepancies: Vec<f64> = task
        .eval_points
        .par_iter()
        .map(|w| {
            let lhs = task.r_sum_at(w)?;
            let rhs = &invert_k(sum, w, ball_s, None)?.inverse()? - &w.inverse()?;
            Ok((&lhs - &rhs).operator_norm())
        })
        .collect::<Result<_>>()?;
    Ok(AdditivityReport {
        points: discrepancies.len(),
        max_discrepancy: discrepancies.iter().copied().fold(0.0, f64::max),
        discrepancies,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct McComparison {
    pub b: ComplexMatrix,
    pub g_sum: ComplexMatrix,
    pub mc_mean: ComplexMatrix,
    pub discrepancy: f64,
    /// `3·stderr`.
    pub stderr_budget: f64,
}

/// Compares `G_{X⊞Y}` from R-summation with a Monte-Carlo model of `X + Y`.
///
/// `points` are `s×s` upper-half-plane matrices; each is laid out in the task's
/// alternating pattern and the lower-half-plane block of the result is compared.
pub fn verify_against_mc(
    task: &ConvolutionTask,
    model: &MatrixModelSpec,
    points: &[ComplexMatrix],
) -> Result<Vec<McComparison>> {
    let dim = task.ball_x.center.dim();
    points
        .iter()
        .map(|b| {
            let s = b.dim();
            if !dim.is_multiple_of(2 * s) {
                return Err(Error::DimensionMismatch { expected: dim / 2, got: s });
            }
            let emb = crate::transforms::alternating_target(b, dim / (2 * s));
            let g = eval_g_of_sum(task, &emb)?.block(s, s, s);
            let mc = mc_estimate_g(model, b)?;
            Ok(McComparison {
                b: b.clone(),
                discrepancy: (&g - &mc.mean).max_abs_entry(),
                g_sum: g,
                mc_mean: mc.mean,
                stderr_budget: 3.0 * mc.stderr,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationRow {
    pub k: f64,
    pub retained_mass: f64,
    pub error: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// `‖G_{μ_k}(b) − G_μ(b)‖` against `√(1 − m_k)(1 + C/r)/r` for each cutoff `k`.
pub fn truncation_sweep(
    law: &ScalarMeasure,
    b: &ComplexMatrix,
    cutoffs: &[f64],
    c_bound: f64,
    r: f64,
) -> Result<Vec<TruncationRow>> {
    let norm = b.operator_norm();
    let margin = b.half_plane_margin();
    if !(norm < c_bound) {
        return Err(Error::MarginViolation(format!("‖b‖ = {norm} is not below C = {c_bound}")));
    }
    if !(margin > r && r > 0.0) {
        return Err(Error::MarginViolation(format!("half-plane margin {margin} is not above r = {r}")));
    }
    if let Some(k) = cutoffs.iter().find(|k| !(**k > 0.0)) {
        return Err(Error::Invalid(format!("truncation cutoff must be positive, got {k}")));
    }
    let full = eval_g(&OVDistribution::scalar_embedded(1, law.clone())?, b)?;
    cutoffs
        .iter()
        .map(|&k| {
            let t = truncate(law, k);
            let g = eval_g(&OVDistribution::scalar_embedded(1, t.truncated)?, b)?;
            let error = (&g - &full).operator_norm();
            let bound = (1.0 - t.retained_mass).max(0.0).sqrt() * (1.0 + c_bound / r) / r;
            Ok(TruncationRow { k, retained_mass: t.retained_mass, error, bound, within_bound: error <= bound })
        })
        .collect()
}

/// Seeded points with `‖b‖ < C` and half-plane margin above `r`.
pub fn sample_test_set(dim: usize, count: usize, c_bound: f64, r: f64, seed: u64) -> Result<Vec<ComplexMatrix>> {
    if !(c_bound > r && r > 0.0) {
        return Err(Error::MarginViolation(format!("need C > r > 0 (C = {c_bound}, r = {r})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = ComplexMatrix::from_fn(dim, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let re = a.real_part().scale_re(rng.random::<f64>() * (c_bound - r) * 0.5);
        let im = r * (1.0 + 0.5 * rng.random::<f64>() * (c_bound / r - 1.0));
        let b = re.shift(c64(0.0, im));
        if b.operator_norm() < c_bound && b.half_plane_margin() > r {
            out.push(b);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberReport {
    pub index: usize,
    /// `sup_b ‖G_k(b) − G_limit(b)‖` (or against the last member if no limit is declared).
    pub sup_error: f64,
    /// `Re(iy·tr G_k(iy))/dim` at the probe height.
    pub asymptotic_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub members: Vec<MemberReport>,
    /// Nonincreasing `sup_error` up to relative noise `1e-12`.
    pub monotone: bool,
    pub envelope_ok: bool,
    /// Limit values on the test set (declared limit, else last member).
    pub limit_values: Vec<ComplexMatrix>,
    pub limit_asymptotic_mass: f64,
    /// The pointwise limit does not behave like `1/z` at infinity.
    pub mass_deficit: bool,
    pub probe_height: f64,
}

/// Uniform-convergence report for a family of Cauchy transforms on a test set.
///
/// The asymptotic mass `Re(iy·G(iy))` tends to 1 for the Cauchy transform of a
/// probability law; a limit that stays visibly below 1 at the probe height is
/// flagged as a mass deficit.
pub fn convergence_check(
    family: &[OVDistribution],
    limit: Option<&OVDistribution>,
    test_set: &[ComplexMatrix],
    envelope: Option<&[f64]>,
    probe_height: f64,
) -> Result<ConvergenceReport> {
    if family.is_empty() || test_set.is_empty() {
        return Err(Error::Invalid("convergence check needs a family and a test set".into()));
    }
    let values: Vec<Vec<ComplexMatrix>> =
        family.iter().map(|d| test_set.iter().map(|b| eval_g(d, b)).collect::<Result<_>>()).collect::<Result<_>>()?;
    let limit_values: Vec<ComplexMatrix> = match limit {
        Some(l) => test_set.iter().map(|b| eval_g(l, b)).collect::<Result<_>>()?,
        None => values.last().expect("non-empty").clone(),
    };
    let mass = |d: &OVDistribution| -> Result<f64> {
        let dim = d.base_dim;
        let b = ComplexMatrix::scalar(dim, c64(0.0, probe_height));
        Ok((eval_g(d, &b)?.trace() * c64(0.0, probe_height)).re / dim as f64)
    };
    let members: Vec<MemberReport> = family
        .iter()
        .zip(&values)
        .enumerate()
        .map(|(index, (d, vals))| {
            let sup_error = vals.iter().zip(&limit_values).map(|(g, l)| (g - l).operator_norm()).fold(0.0, f64::max);
            Ok(MemberReport { index, sup_error, asymptotic_mass: mass(d)? })
        })
        .collect::<Result<_>>()?;
    let monotone = members.windows(2).all(|w| w[1].sup_error <= w[0].sup_error * (1.0 + 1e-12) + 1e-12);
    let envelope_ok = match envelope {
        Some(env) => members.iter().zip(env).all(|(m, e)| m.sup_error <= *e),
        None => true,
    };
    let limit_asymptotic_mass = match limit {
        Some(l) => mass(l)?,
        None => members.last().expect("non-empty").asymptotic_mass,
    };
    // A probability law has Re(iy g(iy)) ≥ 1 − Var/y²-type corrections; 0.9 leaves room for heavy tails.
    let mass_deficit = limit_asymptotic_mass < 0.9;
    Ok(ConvergenceReport {
        members,
        monotone,
        envelope_ok,
        limit_values,
        limit_asymptotic_mass,
        mass_deficit,
        probe_height,
    })
}

/// The non-tight family `½δ₀ + ½δ_k`.
pub fn escaping_mass_family(ks: &[f64]) -> Result<Vec<OVDistribution>> {
    ks.iter().map(|&k| OVDistribution::scalar_embedded(1, ScalarMeasure::atomic(vec![(0.0, 0.5), (k, 0.5)])?)).collect()
}

/// Truncations `μ_k` of a law embedded as scalars in `M_n`.
pub fn truncation_family(law: &ScalarMeasure, base_dim: usize, ks: &[f64]) -> Result<Vec<OVDistribution>> {
    ks.iter().map(|&k| OVDistribution::scalar_embedded(base_dim, truncate(law, k).truncated)).collect()
}

/// Scalar law of a scalar-embedded distribution, if any.
pub fn scalar_law(d: &OVDistribution) -> Option<&ScalarMeasure> {
    match &d.backend {
        Backend::ScalarEmbedded { law } => Some(law),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_example_bound() {
        let rows = truncation_sweep(
            &ScalarMeasure::standard_cauchy(),
            &ComplexMatrix::scalar(1, c64(0.0, 2.0)),
            &[1.0],
            2.1,
            1.9,
        )
        .unwrap();
        assert!((rows[0].bound - 0.5f64.sqrt() * (1.0 + 2.1 / 1.9) / 1.9).abs() < 1e-12);
        assert!((rows[0].bound - 0.783).abs() < 1e-3);
        assert!(rows[0].within_bound);
    }

    #[test]
    fn truncation_trivial_cases() {
        let b = ComplexMatrix::scalar(1, c64(0.5, 2.0));
        let rows = truncation_sweep(&ScalarMeasure::point_mass(0.0), &b, &[0.5, 1.0, 5.0], 3.0, 1.5).unwrap();
        assert!(rows.iter().all(|r| r.error == 0.0));
        let rows = truncation_sweep(&ScalarMeasure::bernoulli(3.0, 0.0), &b, &[4.0], 3.0, 1.5).unwrap();
        assert_eq!(rows[0].error, 0.0);
    }

    #[test]
    fn truncation_rejects_bad_margin() {
        let b = ComplexMatrix::scalar(1, c64(0.0, 1.0));
        assert!(matches!(
            truncation_sweep(&ScalarMeasure::standard_cauchy(), &b, &[1.0], 2.0, 1.5),
            Err(Error::MarginViolation(_))
        ));
    }

    #[test]
    fn escaping_mass_is_flagged() {
        let fam = escaping_mass_family(&[1.0, 10.0, 100.0, 1e3, 1e4, 1e5]).unwrap();
        let b = ComplexMatrix::scalar(1, c64(0.0, 2.0));
        let rep = convergence_check(&fam, None, std::slice::from_ref(&b), None, 50.0).unwrap();
        assert!(rep.mass_deficit);
        let expected = b.inverse().unwrap().scale_re(0.5);
        assert!((&rep.limit_values[0] - &expected).max_abs_entry() < 1e-4);
    }

    #[test]
    fn constant_family_has_zero_error() {
        let d = OVDistribution::scalar_embedded(1, ScalarMeasure::semicircle(1.0)).unwrap();
        let set = sample_test_set(1, 5, 3.0, 0.5, 1).unwrap();
        let rep = convergence_check(&[d.clone(), d.clone(), d], None, &set, None, 50.0).unwrap();
        assert!(rep.members.iter().all(|m| m.sup_error == 0.0));
        assert!(!rep.mass_deficit);
    }
}
