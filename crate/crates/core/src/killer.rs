//! Compositions of Bernoulli F-transforms with critical points at prescribed
//! upper-half-plane targets: F-transforms that are not locally invertible.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::c64;

/// Targets closer than this are merged.
pub const DEDUP_TOL: f64 = 1e-9;
const THETA_GRID: usize = 256;

/// `z ↦ (z − s) − r²/(z − s)`: the F-transform of the symmetric Bernoulli law
/// with atoms `s ± r`.
pub fn bernoulli_stage(s: f64, r: f64, z: Complex64) -> Complex64 {
    let u = z - s;
    u - r * r / u
}

fn stage_derivative(s: f64, r: f64, z: Complex64) -> Complex64 {
    let u = z - s;
    1.0 + r * r / (u * u)
}

fn stage_second_derivative(s: f64, r: f64, z: Complex64) -> Complex64 {
    let u = z - s;
    -2.0 * r * r / (u * u * u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub s: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KillerF {
    pub stages: Vec<Stage>,
    pub targets: Vec<Complex64>,
}

fn check_upper(z: Complex64) -> Result<()> {
    if z.im > 0.0 && z.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("point {z} is not in the upper half-plane")))
    }
}

/// Stage `j` sends the image of target `j` under the earlier stages to a
/// critical point, so the chain rule kills `F′` at every target.
pub fn build_killer(targets: &[Complex64]) -> Result<KillerF> {
    let mut kept: Vec<Complex64> = Vec::with_capacity(targets.len());
    for &z in targets {
        check_upper(z)?;
        if kept.iter().all(|k| (k - z).norm() >= DEDUP_TOL) {
            kept.push(z);
        }
    }
    let mut f = KillerF { stages: Vec::with_capacity(kept.len()), targets: Vec::new() };
    for z in kept {
        let w = eval_killer(&f, z);
        f.stages.push(Stage { s: w.re, r: w.im });
        f.targets.push(z);
    }
    Ok(f)
}

/// Value of the composition (stages applied in order).
pub fn eval_killer(f: &KillerF, z: Complex64) -> Complex64 {
    f.stages.iter().fold(z, |w, st| bernoulli_stage(st.s, st.r, w))
}

/// `F′(z)` as the chain-rule product of stage derivatives.
pub fn killer_derivative(f: &KillerF, z: Complex64) -> Complex64 {
    let mut w = z;
    let mut d = c64(1.0, 0.0);
    for st in &f.stages {
        d *= stage_derivative(st.s, st.r, w);
        w = bernoulli_stage(st.s, st.r, w);
    }
    d
}

/// `F″(z)` by `(h∘g)″ = h″(g)·g′² + h′(g)·g″`.
pub fn killer_second_derivative(f: &KillerF, z: Complex64) -> Complex64 {
    let (mut w, mut d1, mut d2) = (z, c64(1.0, 0.0), c64(0.0, 0.0));
    for st in &f.stages {
        let h1 = stage_derivative(st.s, st.r, w);
        let h2 = stage_second_derivative(st.s, st.r, w);
        d2 = h2 * d1 * d1 + h1 * d2;
        d1 *= h1;
        w = bernoulli_stage(st.s, st.r, w);
    }
    d2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WitnessReport {
    pub point: Complex64,
    pub delta: f64,
    pub abs_derivative: f64,
    /// `max_θ |F(z + δe^{iθ}) − F(z)| / δ²`.
    pub contact_constant: f64,
    /// Same constant at `δ/2`; close to the first one for quadratic contact.
    pub contact_constant_half: f64,
    /// `|F″(z)|` from the chain rule.
    pub second_derivative: f64,
    /// Whether `|F″|δ²/2` clears rounding in `F`, so the two contact constants mean something.
    pub contact_resolved: bool,
    pub quadratic_contact: bool,
    /// Two distinct points `z ± δe^{iθ}` with the closest images on the grid.
    pub pair: (Complex64, Complex64),
    pub pair_image_distance: f64,
    pub locally_invertible: bool,
}

fn contact(f: &KillerF, z: Complex64, delta: f64) -> (f64, (Complex64, Complex64), f64) {
    let fz = eval_killer(f, z);
    let mut sup = 0.0_f64;
    let mut best = (f64::INFINITY, (z, z));
    for j in 0..THETA_GRID {
        let e = Complex64::from_polar(delta, std::f64::consts::TAU * j as f64 / THETA_GRID as f64);
        sup = sup.max((eval_killer(f, z + e) - fz).norm());
        if j < THETA_GRID / 2 {
            let d = (eval_killer(f, z + e) - eval_killer(f, z - e)).norm();
            if d < best.0 {
                best = (d, (z + e, z - e));
            }
        }
    }
    (sup / (delta * delta), best.1, best.0)
}

/// Second-order contact and a near-collision pair at `z`. At a point with
/// `|F′| > 0.1` the report states local invertibility instead.
pub fn non_invertibility_witness(f: &KillerF, z: Complex64, delta: f64) -> Result<WitnessReport> {
    check_upper(z)?;
    if !(delta > 0.0 && delta < z.im) {
        return Err(Error::Invalid(format!("δ = {delta} must lie in (0, Im z)")));
    }
    let abs_derivative = killer_derivative(f, z).norm();
    let (c1, pair, dist) = contact(f, z, delta);
    let (c2, _, _) = contact(f, z, 0.5 * delta);
    let second_derivative = killer_second_derivative(f, z).norm();
    // Deep in a composition F″ can be tiny; then δ-increments drown in
    // rounding and only the analytic F″ ≠ 0 is informative.
    let noise = 1e4 * f64::EPSILON * (1.0 + eval_killer(f, z).norm());
    let contact_resolved = second_derivative * delta * delta / 8.0 > noise;
    let quadratic_contact =
        abs_derivative <= 1e-8 && second_derivative > 0.0 && (!contact_resolved || (c1 - c2).abs() <= 0.1 * c2);
    let locally_invertible = abs_derivative > 0.1;
    Ok(WitnessReport {
        point: z,
        delta,
        abs_derivative,
        contact_constant: c1,
        contact_constant_half: c2,
        second_derivative,
        contact_resolved,
        quadratic_contact,
        pair,
        pair_image_distance: dist,
        locally_invertible,
    })
}

/// Im-increment check `Im F(z) ≥ Im z` on seeded samples of `H⁺`; returns the
/// worst `Im F(z) − Im z`.
pub fn halfplane_check(f: &KillerF, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let z = c64(rng.random_range(-10.0..10.0), 10f64.powf(rng.random_range(-3.0..1.0)));
            eval_killer(f, z).im - z.im
        })
        .fold(f64::INFINITY, f64::min)
}

/// The first `count` points of a Halton sequence in `[-2, 2] × (0, 2]`, a
/// dense sequence in that box.
pub fn dense_targets(count: usize) -> Vec<Complex64> {
    fn radical_inverse(mut k: usize, base: usize) -> f64 {
        let (mut x, mut f) = (0.0, 1.0 / base as f64);
        while k > 0 {
            x += f * (k % base) as f64;
            k /= base;
            f /= base as f64;
        }
        x
    }
    (1..=count).map(|k| c64(4.0 * radical_inverse(k, 2) - 2.0, 2.0 * radical_inverse(k, 3).max(1e-3))).collect()
}

/// Killers for the prefixes of a dense target sequence. Each member is not
/// locally invertible on its prefix; density of the full sequence is what the
/// infinite construction needs, and only finite prefixes are built here.
pub fn prefix_family(targets: &[Complex64], lengths: &[usize]) -> Result<Vec<KillerF>> {
    lengths.iter().map(|&n| build_killer(&targets[..n.min(targets.len())])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_examples() {
        assert!((bernoulli_stage(0.0, 1.0, c64(0.0, 1.0)) - c64(0.0, 2.0)).norm() < 1e-15);
        assert!(stage_derivative(0.0, 2.5, c64(0.0, 2.5)).norm() < 1e-15);
        let z = c64(0.3, 0.7);
        assert_eq!(bernoulli_stage(0.2, 0.0, z), z - 0.2);
    }

    #[test]
    fn two_targets() {
        let f = build_killer(&[c64(0.0, 1.0), c64(1.0, 1.0)]).unwrap();
        assert_eq!(f.stages[0], Stage { s: 0.0, r: 1.0 });
        assert!((f.stages[1].s - 0.5).abs() < 1e-15 && (f.stages[1].r - 1.5).abs() < 1e-15);
        for z in &f.targets {
            assert!(killer_derivative(&f, *z).norm() <= 1e-10);
        }
    }

    #[test]
    fn duplicates_are_merged() {
        let f = build_killer(&[c64(0.0, 1.0), c64(0.0, 1.0), c64(1e-12, 1.0)]).unwrap();
        assert_eq!(f.stages.len(), 1);
        assert!(killer_derivative(&f, c64(0.0, 1.0)).norm() == 0.0);
    }

    #[test]
    fn empty_killer_is_identity() {
        let f = build_killer(&[]).unwrap();
        let z = c64(0.4, 0.9);
        assert_eq!(eval_killer(&f, z), z);
        assert_eq!(killer_derivative(&f, z), c64(1.0, 0.0));
    }

    #[test]
    fn rejects_real_targets() {
        assert!(build_killer(&[c64(1.0, 0.0)]).is_err());
    }

    #[test]
    fn single_stage_contact_constant() {
        let f = build_killer(&[c64(0.0, 1.0)]).unwrap();
        assert!((killer_second_derivative(&f, c64(0.0, 1.0)).norm() - 2.0).abs() < 1e-14);
        let rep = non_invertibility_witness(&f, c64(0.0, 1.0), 1e-3).unwrap();
        assert!((rep.contact_constant - 1.0).abs() < 1e-2);
        assert!(rep.quadratic_contact && !rep.locally_invertible);
        assert!(rep.pair_image_distance <= 1e-2 * rep.delta);
    }
}
