//! Scalar probability laws on the real line.
//!
//! Cauchy, point-mass, Bernoulli and atomic laws are evaluated in closed form.
//! Semicircle and arcsine laws (and truncations of continuous laws) are
//! integrated with adaptive Gauss–Kronrod after a substitution that makes the
//! density smooth: `t = s + γ tan θ` for Cauchy, `t = 2σ sin φ` for the
//! semicircle and `t = r sin φ` for the arcsine law.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, Integrand};

/// Largest cutoff tried by [`tightness_cutoff`].
pub const TIGHTNESS_MAX_CUTOFF: u64 = 1 << 20;

const WEIGHT_TOL: f64 = 1e-12;
const QUAD_ABS_TOL: f64 = 1e-13;
const QUAD_REL_TOL: f64 = 1e-13;
const QUAD_MAX_SEGMENTS: usize = 4000;

/// A probability law on `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarMeasure {
    Cauchy {
        location: f64,
        scale: f64,
    },
    Semicircle {
        variance: f64,
    },
    /// `(δ_{center-radius} + δ_{center+radius}) / 2`.
    Bernoulli {
        radius: f64,
        center: f64,
    },
    /// Density `1/(π sqrt(r² − t²))` on `[-r, r]`.
    Arcsine {
        radius: f64,
    },
    PointMass {
        position: f64,
    },
    Atomic {
        atoms: Vec<(f64, f64)>,
    },
    Quadrature {
        nodes: Vec<f64>,
        weights: Vec<f64>,
    },
    /// `base` restricted to `[-cutoff, cutoff]`, with the missing mass placed at 0.
    Truncated {
        base: Box<ScalarMeasure>,
        cutoff: f64,
    },
}

/// Output of [`truncate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationResult {
    pub truncated: ScalarMeasure,
    pub retained_mass: f64,
    pub cutoff: f64,
}

/// Result of a tightness search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tightness {
    Cutoff(u64),
    NotTight,
}

fn check_off_axis(z: Complex64) -> Result<()> {
    if z.im == 0.0 || !z.im.is_finite() || !z.re.is_finite() {
        Err(Error::RealAxisPoint { re: z.re, im: z.im })
    } else {
        Ok(())
    }
}

fn factorial(m: u32) -> f64 {
    (1..=m).fold(1.0, |a, k| a * k as f64)
}

impl ScalarMeasure {
    pub fn cauchy(location: f64, scale: f64) -> Self {
        Self::Cauchy { location, scale }
    }

    pub fn standard_cauchy() -> Self {
        Self::cauchy(0.0, 1.0)
    }

    pub fn semicircle(variance: f64) -> Self {
        Self::Semicircle { variance }
    }

    pub fn bernoulli(radius: f64, center: f64) -> Self {
        Self::Bernoulli { radius, center }
    }

    pub fn arcsine(radius: f64) -> Self {
        Self::Arcsine { radius }
    }

    pub fn point_mass(position: f64) -> Self {
        Self::PointMass { position }
    }

    pub fn atomic(atoms: Vec<(f64, f64)>) -> Result<Self> {
        let m = Self::Atomic { atoms };
        m.validate()?;
        Ok(m)
    }

    pub fn quadrature(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let m = Self::Quadrature { nodes, weights };
        m.validate()?;
        Ok(m)
    }

    /// Checks the parameter constraints of each variant.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        match self {
            Self::Cauchy { location, scale } => {
                if !(scale.is_finite() && *scale > 0.0 && location.is_finite()) {
                    return bad(format!("cauchy needs finite location and scale > 0, got ({location}, {scale})"));
                }
            }
            Self::Semicircle { variance } => {
                if !(variance.is_finite() && *variance > 0.0) {
                    return bad(format!("semicircle variance must be > 0, got {variance}"));
                }
            }
            Self::Bernoulli { radius, center } => {
                if !(radius.is_finite() && *radius > 0.0 && center.is_finite()) {
                    return bad(format!("bernoulli radius must be > 0, got {radius}"));
                }
            }
            Self::Arcsine { radius } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return bad(format!("arcsine radius must be > 0, got {radius}"));
                }
            }
            Self::PointMass { position } => {
                if !position.is_finite() {
                    return bad("point mass position must be finite".into());
                }
            }
            Self::Atomic { atoms } => {
                if atoms.is_empty() {
                    return bad("atomic measure needs at least one atom".into());
                }
                if atoms.iter().any(|&(x, w)| !x.is_finite() || !(w > 0.0)) {
                    return bad("atoms need finite positions and positive weights".into());
                }
                let total: f64 = atoms.iter().map(|a| a.1).sum();
                if (total - 1.0).abs() > WEIGHT_TOL {
                    return bad(format!("atom weights sum to {total}, not 1"));
                }
            }
            Self::Quadrature { nodes, weights } => {
                if nodes.is_empty() || nodes.len() != weights.len() {
                    return bad("quadrature needs equally many nodes and weights".into());
                }
                if nodes.windows(2).any(|w| !(w[0] < w[1])) {
                    return bad("quadrature nodes must be strictly increasing".into());
                }
                if weights.iter().any(|w| !(*w > 0.0)) || nodes.iter().any(|x| !x.is_finite()) {
                    return bad("quadrature weights must be positive".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > WEIGHT_TOL {
                    return bad(format!("quadrature weights sum to {total}, not 1"));
                }
            }
            Self::Truncated { base, cutoff } => {
                if !(cutoff.is_finite() && *cutoff > 0.0) {
                    return bad(format!("truncation cutoff must be > 0, got {cutoff}"));
                }
                base.validate()?;
            }
        }
        Ok(())
    }

    /// Short human-readable name.
    pub fn label(&self) -> String {
        match self {
            Self::Cauchy { location, scale } => format!("cauchy({location},{scale})"),
            Self::Semicircle { variance } => format!("semicircle({variance})"),
            Self::Bernoulli { radius, center } => format!("bernoulli({radius},{center})"),
            Self::Arcsine { radius } => format!("arcsine({radius})"),
            Self::PointMass { position } => format!("point_mass({position})"),
            Self::Atomic { atoms } => format!("atomic[{}]", atoms.len()),
            Self::Quadrature { nodes, .. } => format!("quadrature[{}]", nodes.len()),
            Self::Truncated { base, cutoff } => format!("truncated({},{cutoff})", base.label()),
        }
    }

    /// Location/scale Cauchy laws; the only laws the free moment recursion accepts.
    pub fn is_cauchy_family(&self) -> bool {
        matches!(self, Self::Cauchy { .. })
    }

    /// Finite atoms `(position, weight)` if the law is purely atomic.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            Self::PointMass { position } => Some(vec![(*position, 1.0)]),
            Self::Bernoulli { radius, center } => Some(vec![(center - radius, 0.5), (center + radius, 0.5)]),
            Self::Atomic { atoms } => Some(atoms.clone()),
            Self::Quadrature { nodes, weights } => Some(nodes.iter().copied().zip(weights.iter().copied()).collect()),
            Self::Truncated { base, cutoff } => {
                let inner = base.atoms()?;
                Some(truncate_atoms(&inner, *cutoff).0)
            }
            _ => None,
        }
    }

    /// Smallest `k` with support in `[-k, k]`, if bounded.
    pub fn support_radius(&self) -> Option<f64> {
        match self {
            Self::Cauchy { .. } => None,
            Self::Semicircle { variance } => Some(2.0 * variance.sqrt()),
            Self::Arcsine { radius } => Some(*radius),
            Self::Truncated { base, cutoff } => Some(base.support_radius().map_or(*cutoff, |r| r.min(*cutoff))),
            _ => self.atoms().map(|a| a.iter().fold(0.0_f64, |m, &(x, _)| m.max(x.abs()))),
        }
    }

    /// `∫ f dμ` over the interval `[lo, hi]` (closed; infinite endpoints allowed).
    pub fn integrate_on<T: Integrand>(&self, lo: f64, hi: f64, f: &impl Fn(f64) -> T) -> Option<T> {
        if !(lo <= hi) {
            return None;
        }
        match self {
            Self::Cauchy { location, scale } => {
                let th = |x: f64| {
                    if x == f64::INFINITY {
                        FRAC_PI_2
                    } else if x == f64::NEG_INFINITY {
                        -FRAC_PI_2
                    } else {
                        ((x - location) / scale).atan()
                    }
                };
                let (a, b) = (th(lo), th(hi));
                if b <= a {
                    return None;
                }
                let g = |theta: f64| {
                    let v = f(location + scale * theta.tan());
                    let mut out = v.zero_like();
                    out.add_scaled(&v, 1.0 / PI);
                    out
                };
                Some(integrate(g, a, b, QUAD_ABS_TOL, QUAD_REL_TOL, QUAD_MAX_SEGMENTS).value)
            }
            Self::Semicircle { variance } => {
                let two_sigma = 2.0 * variance.sqrt();
                let phi = |x: f64| (x / two_sigma).clamp(-1.0, 1.0).asin();
                let (a, b) = (phi(lo), phi(hi));
                if b <= a {
                    return None;
                }
                let g = |p: f64| {
                    let v = f(two_sigma * p.sin());
                    let c = p.cos();
                    let mut out = v.zero_like();
                    out.add_scaled(&v, 2.0 / PI * c * c);
                    out
                };
                Some(integrate(g, a, b, QUAD_ABS_TOL, QUAD_REL_TOL, QUAD_MAX_SEGMENTS).value)
            }
            Self::Arcsine { radius } => {
                let phi = |x: f64| (x / radius).clamp(-1.0, 1.0).asin();
                let (a, b) = (phi(lo), phi(hi));
                if b <= a {
                    return None;
                }
                let g = |p: f64| {
                    let v = f(radius * p.sin());
                    let mut out = v.zero_like();
                    out.add_scaled(&v, 1.0 / PI);
                    out
                };
                Some(integrate(g, a, b, QUAD_ABS_TOL, QUAD_REL_TOL, QUAD_MAX_SEGMENTS).value)
            }
            Self::Truncated { base, cutoff } => {
                let inner = base.integrate_on(lo.max(-cutoff), hi.min(*cutoff), f);
                let defect = 1.0 - base.mass_in(-cutoff, *cutoff);
                let atom = if lo <= 0.0 && 0.0 <= hi && defect > 0.0 {
                    let v = f(0.0);
                    let mut out = v.zero_like();
                    out.add_scaled(&v, defect);
                    Some(out)
                } else {
                    None
                };
                match (inner, atom) {
                    (Some(mut a), Some(b)) => {
                        a.add_scaled(&b, 1.0);
                        Some(a)
                    }
                    (a, b) => a.or(b),
                }
            }
            _ => {
                let atoms = self.atoms().expect("atomic variant");
                let mut acc: Option<T> = None;
                for (x, w) in atoms.into_iter().filter(|&(x, _)| lo <= x && x <= hi) {
                    let v = f(x);
                    match acc.as_mut() {
                        Some(a) => a.add_scaled(&v, w),
                        None => {
                            let mut a = v.zero_like();
                            a.add_scaled(&v, w);
                            acc = Some(a);
                        }
                    }
                }
                acc
            }
        }
    }

    /// `∫ f dμ` over the whole line.
    pub fn expect<T: Integrand>(&self, f: &impl Fn(f64) -> T) -> T {
        match self.integrate_on(f64::NEG_INFINITY, f64::INFINITY, f) {
            Some(v) => v,
            None => {
                let v = f(0.0);
                v.zero_like()
            }
        }
    }

    /// `μ([lo, hi])`.
    pub fn mass_in(&self, lo: f64, hi: f64) -> f64 {
        if !(lo <= hi) {
            return 0.0;
        }
        match self {
            Self::Cauchy { location, scale } => {
                let a = if lo == f64::NEG_INFINITY { -FRAC_PI_2 } else { ((lo - location) / scale).atan() };
                let b = if hi == f64::INFINITY { FRAC_PI_2 } else { ((hi - location) / scale).atan() };
                ((b - a) / PI).clamp(0.0, 1.0)
            }
            Self::Semicircle { .. } | Self::Arcsine { .. } => (self.cdf(hi) - self.cdf(lo)).clamp(0.0, 1.0),
            Self::Truncated { base, cutoff } => {
                let inner = base.mass_in(lo.max(-cutoff), hi.min(*cutoff));
                let defect = 1.0 - base.mass_in(-cutoff, *cutoff);
                let atom = if lo <= 0.0 && 0.0 <= hi { defect } else { 0.0 };
                (inner + atom).clamp(0.0, 1.0)
            }
            _ => self
                .atoms()
                .expect("atomic variant")
                .iter()
                .filter(|&&(x, _)| lo <= x && x <= hi)
                .map(|a| a.1)
                .sum::<f64>()
                .min(1.0),
        }
    }

    /// `μ((-∞, x])`.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Cauchy { location, scale } => 0.5 + ((x - location) / scale).atan() / PI,
            Self::Semicircle { variance } => {
                let s2 = 2.0 * variance.sqrt();
                if x <= -s2 {
                    0.0
                } else if x >= s2 {
                    1.0
                } else {
                    let u = x / s2;
                    0.5 + (u * (1.0 - u * u).sqrt() + u.asin()) / PI
                }
            }
            Self::Arcsine { radius } => {
                if x <= -radius {
                    0.0
                } else if x >= *radius {
                    1.0
                } else {
                    0.5 + (x / radius).asin() / PI
                }
            }
            _ => self.mass_in(f64::NEG_INFINITY, x),
        }
    }

    /// Scalar Cauchy transform `g(z) = ∫ (z − t)^{-1} dμ(t)`, `Im z ≠ 0`.
    pub fn g(&self, z: Complex64) -> Result<Complex64> {
        check_off_axis(z)?;
        Ok(match self {
            Self::Cauchy { location, scale } => {
                let pole =
                    if z.im > 0.0 { Complex64::new(*location, -scale) } else { Complex64::new(*location, *scale) };
                1.0 / (z - pole)
            }
            Self::Semicircle { .. } | Self::Arcsine { .. } | Self::Truncated { .. } => {
                self.expect(&|t: f64| 1.0 / (z - t))
            }
            _ => self.atoms().expect("atomic variant").iter().map(|&(x, w)| w / (z - x)).sum(),
        })
    }

    /// Scalar F-transform `F = 1/g`.
    pub fn f(&self, z: Complex64) -> Result<Complex64> {
        let g = self.g(z)?;
        Ok(1.0 / g)
    }

    /// `m`-th derivative of `g`: `(−1)^m m! ∫ (z − t)^{−(m+1)} dμ(t)`.
    pub fn g_derivative(&self, z: Complex64, order: u32) -> Result<Complex64> {
        if order == 0 {
            return self.g(z);
        }
        check_off_axis(z)?;
        let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
        let pref = sign * factorial(order);
        let p = -(order as i32 + 1);
        Ok(match self {
            Self::Cauchy { location, scale } => {
                let pole =
                    if z.im > 0.0 { Complex64::new(*location, -scale) } else { Complex64::new(*location, *scale) };
                pref * (z - pole).powi(p)
            }
            Self::Semicircle { .. } | Self::Arcsine { .. } | Self::Truncated { .. } => {
                pref * self.expect(&|t: f64| (z - t).powi(p))
            }
            _ => {
                pref * self
                    .atoms()
                    .expect("atomic variant")
                    .iter()
                    .map(|&(x, w)| w * (z - x).powi(p))
                    .sum::<Complex64>()
            }
        })
    }

    /// Generalised inverse `inf { x : F(x) ≥ p }` for `0 < p < 1`.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Self::Cauchy { location, scale } => location + scale * (PI * (p - 0.5)).tan(),
            Self::PointMass { position } => *position,
            Self::Arcsine { radius } => radius * (PI * (p - 0.5)).sin(),
            Self::Semicircle { .. } | Self::Truncated { .. } => {
                let r = self.support_radius().expect("bounded");
                bisect_quantile(|x| self.cdf(x), p, -r, r)
            }
            _ => {
                let mut atoms = self.atoms().expect("atomic variant");
                atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut acc = 0.0;
                for &(x, w) in &atoms {
                    acc += w;
                    // Ties at a cumulative boundary resolve to the smaller atom.
                    if acc >= p - 1e-15 {
                        return x;
                    }
                }
                atoms.last().map(|a| a.0).unwrap_or(0.0)
            }
        }
    }
}

fn bisect_quantile(cdf: impl Fn(f64) -> f64, p: f64, lo: f64, hi: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if cdf(m) >= p {
            b = m;
        } else {
            a = m;
        }
    }
    b
}

fn truncate_atoms(atoms: &[(f64, f64)], k: f64) -> (Vec<(f64, f64)>, f64) {
    let mut kept: Vec<(f64, f64)> = atoms.iter().copied().filter(|&(x, _)| -k <= x && x <= k).collect();
    let retained: f64 = kept.iter().map(|a| a.1).sum();
    let defect = 1.0 - retained;
    if defect > 0.0 {
        if let Some(a) = kept.iter_mut().find(|a| a.0 == 0.0) {
            a.1 += defect;
        } else {
            kept.push((0.0, defect));
        }
    }
    kept.sort_by(|a, b| a.0.total_cmp(&b.0));
    (kept, retained.min(1.0))
}

/// Restricts `μ` to `[-k, k]` and moves the missing mass to an atom at 0.
pub fn truncate(mu: &ScalarMeasure, k: f64) -> TruncationResult {
    assert!(k > 0.0, "truncation cutoff must be positive");
    let retained = mu.mass_in(-k, k);
    let truncated = if retained >= 1.0 {
        mu.clone()
    } else if let Some(atoms) = mu.atoms() {
        let (kept, _) = truncate_atoms(&atoms, k);
        if kept.len() == 1 {
            ScalarMeasure::PointMass { position: kept[0].0 }
        } else {
            ScalarMeasure::Atomic { atoms: kept }
        }
    } else {
        ScalarMeasure::Truncated { base: Box::new(mu.clone()), cutoff: k }
    };
    TruncationResult { truncated, retained_mass: retained, cutoff: k }
}

/// Smallest `N ≤ 2^20` with `μ([-N, N]) > 1 − ε` for every member.
pub fn tightness_cutoff(family: &[ScalarMeasure], eps: f64) -> Tightness {
    tightness_cutoff_indexed(family.len(), |i| family[i].clone(), eps)
}

/// [`tightness_cutoff`] for a lazily generated family of `count` members.
pub fn tightness_cutoff_indexed(count: usize, member: impl Fn(usize) -> ScalarMeasure, eps: f64) -> Tightness {
    assert!(eps > 0.0 && eps < 1.0, "epsilon must lie in (0, 1)");
    let ok = |n: u64| (0..count).all(|i| member(i).mass_in(-(n as f64), n as f64) > 1.0 - eps);
    if !ok(TIGHTNESS_MAX_CUTOFF) {
        return Tightness::NotTight;
    }
    let (mut lo, mut hi) = (0_u64, TIGHTNESS_MAX_CUTOFF);
    // invariant: ok(hi), and lo == 0 or !ok(lo)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Tightness::Cutoff(hi)
}

/// Nodes `Q((j − ½)/N)`, `j = 1..N`.
pub fn quantile_nodes(mu: &ScalarMeasure, n: usize) -> Vec<f64> {
    (1..=n).map(|j| mu.quantile((j as f64 - 0.5) / n as f64)).collect()
}
