//! Globally adaptive Gauss–Kronrod (7/15) quadrature for scalar- and
//! matrix-valued integrands on a finite interval.

// Nodes and weights are quoted to more digits than f64 holds.
#![allow(clippy::excessive_precision)]

use num_complex::Complex64;

use crate::numerics::ComplexMatrix;

// QUADPACK qk15 abscissae and weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.000_000_000_000_000_000_000_000_000_000_000,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_64, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// Values that can be integrated: a vector space with a norm.
pub trait Integrand: Clone {
    fn zero_like(&self) -> Self;
    fn add_scaled(&mut self, other: &Self, w: f64);
    fn err_norm(&self) -> f64;
}

impl Integrand for Complex64 {
    fn zero_like(&self) -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += other * w;
    }
    fn err_norm(&self) -> f64 {
        self.norm()
    }
}

impl Integrand for ComplexMatrix {
    fn zero_like(&self) -> Self {
        ComplexMatrix::zeros(self.dim())
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self = &*self + &other.scale_re(w);
    }
    fn err_norm(&self) -> f64 {
        self.max_abs_entry()
    }
}

#[derive(Debug, Clone)]
pub struct QuadResult<T> {
    pub value: T,
    pub error: f64,
    pub intervals: usize,
}

struct Segment<T> {
    a: f64,
    b: f64,
    value: T,
    error: f64,
}

fn gk15<T: Integrand>(f: &impl Fn(f64) -> T, a: f64, b: f64) -> (T, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kron = fc.zero_like();
    let mut gauss = fc.zero_like();
    kron.add_scaled(&fc, WGK[7]);
    gauss.add_scaled(&fc, WG[3]);
    for (j, (&x, &wk)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        kron.add_scaled(&f1, wk);
        kron.add_scaled(&f2, wk);
        if j % 2 == 1 {
            gauss.add_scaled(&f1, WG[j / 2]);
            gauss.add_scaled(&f2, WG[j / 2]);
        }
    }
    let mut diff = kron.clone();
    diff.add_scaled(&gauss, -1.0);
    let err = diff.err_norm() * half.abs();
    let mut val = kron.zero_like();
    val.add_scaled(&kron, half);
    (val, err)
}

/// Integrates `f` over `[a, b]` until the summed error estimate is below
/// `max(abs_tol, rel_tol * |value|)` or `max_segments` is reached.
pub fn integrate<T: Integrand>(
    f: impl Fn(f64) -> T,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_segments: usize,
) -> QuadResult<T> {
    let (v, e) = gk15(&f, a, b);
    let mut segs = vec![Segment { a, b, value: v, error: e }];
    loop {
        let total_err: f64 = segs.iter().map(|s| s.error).sum();
        let mut total = segs[0].value.zero_like();
        for s in &segs {
            total.add_scaled(&s.value, 1.0);
        }
        let target = abs_tol.max(rel_tol * total.err_norm());
        if total_err <= target || segs.len() >= max_segments {
            return QuadResult { value: total, error: total_err, intervals: segs.len() };
        }
        let (worst, _) = segs.iter().enumerate().max_by(|x, y| x.1.error.total_cmp(&y.1.error)).expect("non-empty");
        let s = segs.swap_remove(worst);
        let mid = 0.5 * (s.a + s.b);
        if mid <= s.a || mid >= s.b {
            // Interval exhausted at machine precision; keep it and stop refining it.
            segs.push(Segment { error: 0.0, ..s });
            continue;
        }
        let (v1, e1) = gk15(&f, s.a, mid);
        let (v2, e2) = gk15(&f, mid, s.b);
        segs.push(Segment { a: s.a, b: mid, value: v1, error: e1 });
        segs.push(Segment { a: mid, b: s.b, value: v2, error: e2 });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let r = integrate(|x: f64| Complex64::new(x * x * x + 1.0, x), 0.0, 2.0, 1e-14, 0.0, 50);
        assert!((r.value - Complex64::new(6.0, 2.0)).norm() < 1e-13);
    }

    #[test]
    fn peaked_integrand() {
        // ∫_{-1}^{1} 1/(x^2 + 1e-4) dx = 2/0.01 * atan(100)
        let exact = 2.0 / 0.01 * (100.0_f64).atan();
        let r = integrate(|x: f64| Complex64::new(1.0 / (x * x + 1e-4), 0.0), -1.0, 1.0, 1e-10, 0.0, 2000);
        assert!((r.value.re - exact).abs() < 1e-8, "{} vs {}", r.value.re, exact);
    }
}
