//! Acceptance suite. Each test prints one PASS/FAIL line (directly to the
//! terminal, so it shows without `--nocapture`) and then asserts.
//! Run alone with `cargo test -p ovfree-cli --test acceptance`.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;

use num_complex::Complex64;
use ovfree::convolution::{
    convergence_check, escaping_mass_family, sample_test_set, suggest_lambda, truncation_family, truncation_sweep,
    verify_additivity, verify_against_mc, ConvolutionTask,
};
use ovfree::killer::{build_killer, halfplane_check, killer_derivative, non_invertibility_witness};
use ovfree::moments::{fbcs_check, matrix_g_via_neumann, neumann_dominance, neumann_tail_bound, partial_fractions};
use ovfree::ovdist::{eval_g, ModelVar, Realization};
use ovfree::transforms::{
    alternating_target, bloch_certify, block_resolvent_identity_check, invert_g, omega_membership, sample_block_points,
};
use ovfree::{c64, BasePoint, ComplexMatrix, IndependenceMode, MatrixModelSpec, OVDistribution, ScalarMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{verdict}] acceptance {id:>2} {name}: {detail}");
    assert!(pass, "acceptance {id} ({name}) failed: {detail}");
}

fn random_matrix(rng: &mut ChaCha8Rng, dim: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(dim, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn random_unitary(rng: &mut ChaCha8Rng, dim: usize) -> ComplexMatrix {
    random_matrix(rng, dim).real_part().hermitian_eigen().1
}

/// Hermitian with eigenvalues `±10^e`, `e` uniform in `[-3, 6]`.
fn wide_hermitian(rng: &mut ChaCha8Rng, dim: usize) -> ComplexMatrix {
    let u = random_unitary(rng, dim);
    let eig: Vec<Complex64> = (0..dim)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            c64(sign * 10f64.powf(rng.random_range(-3.0..6.0)), 0.0)
        })
        .collect();
    &(&u * &ComplexMatrix::from_diagonal(&eig)) * &u.adjoint()
}

fn scalar(law: ScalarMeasure) -> OVDistribution {
    OVDistribution::scalar_embedded(1, law).unwrap()
}

fn task(
    x: OVDistribution,
    y: OVDistribution,
    sum: Option<OVDistribution>,
    lambda: f64,
    points: usize,
) -> ConvolutionTask {
    let base = BasePoint::new(1, x.base_dim, lambda).unwrap();
    let t = ConvolutionTask::new(x, y, sum, &base, lambda / 2.0).unwrap();
    let pts = t.sample_points(points, 7).unwrap();
    t.with_points(pts)
}

/// `φ(∏ (z_j − X)^{-1})` through partial fractions and derivatives of `g`,
/// bypassing the closed form the library uses for Cauchy laws.
fn generic_single_var(mu: &ScalarMeasure, zs: &[Complex64]) -> Complex64 {
    let pf = partial_fractions(zs);
    let mut acc = c64(0.0, 0.0);
    for ((pole, _), coeffs) in pf.poles.iter().zip(&pf.coefficients) {
        let mut fact = 1.0;
        for (k, c) in coeffs.iter().enumerate() {
            if k > 0 {
                fact *= -(k as f64);
            }
            acc += c * mu.g_derivative(*pole, k as u32).unwrap() / fact;
        }
    }
    acc
}

#[test]
fn a01_fbcs_agreement() {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut worst_generic) = (0.0_f64, 0.0_f64);
    let cauchy = ScalarMeasure::standard_cauchy();
    for _ in 0..200 {
        let len = rng.random_range(1..=6);
        let nvars = rng.random_range(1..=3);
        let zs: Vec<Complex64> =
            (0..len).map(|_| c64(rng.random_range(-3.0..3.0), 10f64.powf(rng.random_range(-1.0..0.5)))).collect();
        let idx: Vec<usize> = (0..len).map(|_| rng.random_range(1..=nvars)).collect();
        let rep = fbcs_check(&zs, &idx).unwrap();
        worst = worst.max(rep.max_deviation());
        worst_generic = worst_generic.max((generic_single_var(&cauchy, &zs) - rep.reference).norm());
    }
    report(
        1,
        "FBCS agreement",
        worst <= TOL && worst_generic <= TOL,
        format!("200 words, max deviation {worst:.2e}, partial-fraction route {worst_generic:.2e} (tol {TOL:.0e})"),
    );
}

/// `B = D + B'` with `Im d_ℓ ∈ [1, 2]` and `‖B'‖ = q·min Im d`.
fn dominant_matrix(rng: &mut ChaCha8Rng, m: usize, q: f64) -> ComplexMatrix {
    let diag: Vec<Complex64> = (0..m).map(|_| c64(rng.random_range(-1.0..1.0), rng.random_range(1.0..2.0))).collect();
    let min_im = diag.iter().map(|d| d.im).fold(f64::INFINITY, f64::min);
    let mut off = random_matrix(rng, m);
    for i in 0..m {
        off.set(i, i, c64(0.0, 0.0));
    }
    let off = off.scale_re(q * min_im / off.operator_norm());
    &off + &ComplexMatrix::from_diagonal(&diag)
}

#[test]
fn a02_matrix_corollary() {
    const TAIL_TOL: f64 = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst_ratio, mut worst_tail, mut ok) = (0.0_f64, 0.0_f64, true);
    for k in 0..50 {
        // Dense expansions grow like (m−1)^p paths; larger m gets smaller q.
        let (m, q_max) = [(2, 0.5), (3, 0.2), (4, 0.1)][k % 3];
        let q = rng.random_range(0.05..q_max);
        let n = [1, m][rng.random_range(0..2)];
        let b = dominant_matrix(&mut rng, m, q);
        let dom = neumann_dominance(&b);
        let p_max = (0..).find(|&p| neumann_tail_bound(dom, p) <= TAIL_TOL).unwrap();
        let exact = b.shift(c64(0.0, 1.0)).inverse().unwrap();
        for mode in [IndependenceMode::Free, IndependenceMode::Boolean] {
            let laws = vec![ScalarMeasure::standard_cauchy(); n];
            let (g, tail) = matrix_g_via_neumann(&b, &laws, mode, p_max).unwrap();
            let err = (&g - &exact).operator_norm();
            ok &= err <= tail && tail <= TAIL_TOL;
            worst_ratio = worst_ratio.max(err / tail);
            worst_tail = worst_tail.max(tail);
        }
    }
    report(
        2,
        "matrix corollary",
        ok,
        format!("50 B × {{free, boolean}}, max error/tail {worst_ratio:.2e}, max tail {worst_tail:.2e} (tol {TAIL_TOL:.0e})"),
    );
}

#[test]
fn a03_r_additivity() {
    const TOL: f64 = 1e-8;
    let e1 = ComplexMatrix::from_real_rows(&[vec![0.5, 0.1], vec![0.2, 0.3]]).unwrap();
    let e2 = ComplexMatrix::from_real_rows(&[vec![0.2, 0.0], vec![0.1, 0.4]]).unwrap();
    let c1 =
        ComplexMatrix::from_rows(&[vec![c64(0.05, 0.0), c64(0.01, 0.02)], vec![c64(0.01, -0.02), c64(-0.03, 0.0)]])
            .unwrap();
    let c2 = ComplexMatrix::from_real_rows(&[vec![-0.02, 0.04], vec![0.04, 0.06]]).unwrap();
    let ov = |c: Vec<ComplexMatrix>| OVDistribution::ov_semicircular(c).unwrap();
    let dirac = |c: ComplexMatrix| OVDistribution::dirac(c).unwrap();
    let cases = vec![
        (
            "semicircle pair",
            task(
                scalar(ScalarMeasure::semicircle(0.5)),
                scalar(ScalarMeasure::semicircle(0.25)),
                Some(scalar(ScalarMeasure::semicircle(0.75))),
                0.25,
                20,
            ),
        ),
        ("ov-semicircular n=2", task(ov(vec![e1.clone()]), ov(vec![e2.clone()]), Some(ov(vec![e1, e2])), 0.3, 20)),
        ("dirac", task(dirac(c1.clone()), dirac(c2.clone()), Some(dirac(&c1 + &c2)), 0.3, 20)),
        (
            "bernoulli+bernoulli",
            task(
                scalar(ScalarMeasure::bernoulli(1.0, 0.0)),
                scalar(ScalarMeasure::bernoulli(1.0, 0.0)),
                Some(scalar(ScalarMeasure::arcsine(2.0))),
                0.2,
                20,
            ),
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, t) in &cases {
        let rep = verify_additivity(t).unwrap();
        ok &= rep.points >= 20 && rep.max_discrepancy <= TOL;
        parts.push(format!("{name} {:.1e}/{}pts", rep.max_discrepancy, rep.points));
    }

    let x = scalar(ScalarMeasure::standard_cauchy());
    let b = ComplexMatrix::scalar(1, c64(0.0, 2.0));
    let lambda = suggest_lambda(&x, &x, &alternating_target(&b, 1), 1).unwrap();
    let t = task(x.clone(), x, None, lambda, 0);
    let var = ModelVar { law: ScalarMeasure::standard_cauchy(), realization: Realization::HaarRotated };
    let model = MatrixModelSpec {
        n: 1,
        size: 200,
        trials: 16,
        seed: 11,
        vars: vec![var.clone(), var],
        mixer: "X1 + X2".into(),
        constants: Default::default(),
    };
    let mc = &verify_against_mc(&t, &model, &[b]).unwrap()[0];
    ok &= mc.discrepancy <= mc.stderr_budget;
    parts.push(format!("MC cauchy pair {:.1e} vs 3·stderr {:.1e}", mc.discrepancy, mc.stderr_budget));
    report(3, "R-additivity", ok, format!("{} (tol {TOL:.0e})", parts.join(", ")));
}

#[test]
fn a04_certified_inversion() {
    const TOL: f64 = 1e-9;
    const BAND: f64 = 2.0;
    let a = ComplexMatrix::from_real_rows(&[vec![0.8, 0.24], vec![0.16, 0.56]]).unwrap();
    // (distribution, subject to the linear-radius band)
    let dists = [
        (scalar(ScalarMeasure::standard_cauchy()), true),
        (scalar(ScalarMeasure::semicircle(1.0)), true),
        (OVDistribution::ov_semicircular(vec![a]).unwrap(), true),
        (scalar(ScalarMeasure::bernoulli(1.0, 0.2)), false),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut worst, mut worst_band, mut ok) = (0.0_f64, 0.0_f64, true);
    for (dist, banded) in &dists {
        let mut ratios = Vec::new();
        for lambda in [0.1, 0.2, 0.4, 0.8] {
            let base = BasePoint::new(1, dist.base_dim, lambda).unwrap();
            let ball = bloch_certify(dist, &base, lambda / 2.0).unwrap();
            ratios.push(ball.r / lambda);
            for _ in 0..100 {
                let y = random_matrix(&mut rng, ball.center.dim());
                let w = &ball.image_center + &y.scale_re(0.95 * ball.p * rng.random::<f64>() / y.operator_norm());
                let err = match invert_g(dist, &w, &ball, None) {
                    Ok(b) => (&eval_g(dist, &b).unwrap() - &w).operator_norm(),
                    Err(_) => f64::INFINITY,
                };
                worst = worst.max(err);
            }
        }
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0_f64), |(l, h), &x| (l.min(x), h.max(x)));
        if *banded {
            worst_band = worst_band.max(hi / lo);
        }
    }
    ok &= worst <= TOL && worst_band <= BAND;
    report(
        4,
        "certified inversion",
        ok,
        format!("4 laws × 4 λ × 100 targets, max round trip {worst:.2e} (tol {TOL:.0e}), max r/λ spread {worst_band:.3} (band {BAND})"),
    );
}

#[test]
fn a05_truncation_bound() {
    const NOISE: f64 = 1e-12;
    let cutoffs: Vec<f64> = (1..=32).map(f64::from).collect();
    let points = [(c64(0.0, 2.0), 2.1, 1.9), (c64(0.3, 2.0), 2.1, 1.9), (c64(-0.5, 1.5), 1.7, 1.4)];
    let laws = [ScalarMeasure::standard_cauchy(), ScalarMeasure::semicircle(1.0), ScalarMeasure::bernoulli(3.0, 0.0)];
    let (mut cells, mut ok, mut worst) = (0, true, 0.0_f64);
    for law in &laws {
        for &(z, c, r) in &points {
            let rows = truncation_sweep(law, &ComplexMatrix::scalar(1, z), &cutoffs, c, r).unwrap();
            cells += rows.len();
            ok &= rows.iter().all(|row| row.within_bound);
            ok &= rows.windows(2).all(|w| w[1].error <= w[0].error + NOISE);
            worst = worst.max(rows.iter().map(|row| row.error / row.bound.max(f64::MIN_POSITIVE)).fold(0.0, f64::max));
        }
    }
    report(5, "truncation bound", ok, format!("{cells} cells, max error/bound {worst:.3}, monotone up to {NOISE:.0e}"));
}

#[test]
fn a06_resolvent_bounds() {
    // Relative slack for rounding in inverting matrices with condition up to ~1e9.
    const SLACK: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut violations, mut worst1, mut worst2) = (0, 0.0_f64, 0.0_f64);
    for _ in 0..10_000 {
        let dim = rng.random_range(1..=5);
        let a = wide_hermitian(&mut rng, dim);
        let eps = 10f64.powf(rng.random_range(-2.0..1.0));
        let c = random_matrix(&mut rng, dim).scale_re(10f64.powf(rng.random_range(-2.0..1.0)));
        let b = (&c * &c.adjoint()).shift(c64(eps, 0.0));
        let inv = (&a + &b.scale(c64(0.0, 1.0))).inverse().unwrap();
        let r1 = inv.operator_norm() * eps;
        let r2 = (&a * &inv).operator_norm() / (1.0 + b.operator_norm() / eps);
        worst1 = worst1.max(r1);
        worst2 = worst2.max(r2);
        if r1 > 1.0 + SLACK || r2 > 1.0 + SLACK {
            violations += 1;
        }
    }
    report(
        6,
        "resolvent bounds",
        violations == 0,
        format!("10000 samples, {violations} violations, max ‖(a+ib)⁻¹‖·ε {worst1:.6}, max ‖a(a+ib)⁻¹‖/(1+‖b‖/ε) {worst2:.6}"),
    );
}

#[test]
fn a07_omega_certificate() {
    const SLACK: f64 = 1e-6;
    const MODEL_DIM: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let (mut accepted, mut failures, mut worst) = (0, 0, 0.0_f64);
    while accepted < 1000 {
        let n = rng.random_range(1..=2);
        let s = rng.random_range(1..=2);
        let dim = 2 * n * s;
        let mut b = random_matrix(&mut rng, dim).scale_re(rng.random_range(0.01..0.5));
        for j in 0..2 * n {
            let h = random_matrix(&mut rng, s).real_part().scale_re(rng.random_range(0.0..3.0));
            let c = random_matrix(&mut rng, s);
            let im = (&c * &c.adjoint()).shift(c64(rng.random_range(0.1..1.0), 0.0));
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            b.set_block(j * s, j * s, &(h + im.scale(c64(0.0, sign))));
        }
        let Ok(p) = omega_membership(&b, n, s) else { continue };
        accepted += 1;
        // a ⊗ 1 − b on C^dim ⊗ C^N with a self-adjoint in M_N.
        let a = wide_hermitian(&mut rng, MODEL_DIM);
        let op = &ComplexMatrix::identity(dim).kron(&a) - &b.kron(&ComplexMatrix::identity(MODEL_DIM));
        match op.inverse() {
            Ok(inv) => {
                let ratio = inv.operator_norm() / p.resolvent_bound();
                worst = worst.max(ratio);
                if ratio > 1.0 + SLACK {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    report(
        7,
        "Omega resolvent certificate",
        failures == 0,
        format!("{accepted} accepted points, {failures} failures, max ‖(a−b)⁻¹‖/envelope {worst:.6}"),
    );
}

#[test]
fn a08_block_identity() {
    const TOL: f64 = 1e-9;
    let laws = [
        ScalarMeasure::standard_cauchy(),
        ScalarMeasure::cauchy(0.5, 2.0),
        ScalarMeasure::semicircle(1.0),
        ScalarMeasure::arcsine(2.0),
        ScalarMeasure::bernoulli(1.0, 0.3),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut worst = 0.0_f64;
    for k in 0..50 {
        let dist = scalar(laws[k % laws.len()].clone());
        let dim = [2, 4][rng.random_range(0..2)];
        let inv_norm = rng.random_range(0.1..0.8);
        let b = sample_block_points(dim, 1, inv_norm, rng.random()).pop().unwrap();
        let disc = block_resolvent_identity_check(&dist, &b).unwrap_or(f64::INFINITY);
        worst = worst.max(disc);
    }
    report(8, "block identity", worst <= TOL, format!("50 (μ, B), max discrepancy {worst:.2e} (tol {TOL:.0e})"));
}

#[test]
fn a09_killer() {
    const TOL: f64 = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let (mut worst_d, mut contact_ok, mut worst_inc) = (0.0_f64, true, f64::INFINITY);
    for set in 0..20 {
        let n = rng.random_range(1..=5);
        let targets: Vec<Complex64> =
            (0..n).map(|_| c64(rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0))).collect();
        let f = build_killer(&targets).unwrap();
        for &z in &targets {
            worst_d = worst_d.max(killer_derivative(&f, z).norm());
            let w = non_invertibility_witness(&f, z, 1e-3).unwrap();
            contact_ok &= w.quadratic_contact && !w.locally_invertible;
        }
        worst_inc = worst_inc.min(halfplane_check(&f, 10_000, set));
    }
    let ok = worst_d <= TOL && contact_ok && worst_inc >= 0.0;
    report(
        9,
        "killer F",
        ok,
        format!(
            "20 target sets, max |F'| {worst_d:.2e} (tol {TOL:.0e}), quadratic contact {contact_ok}, min Im F − Im z {worst_inc:.2e} on 10000 samples each"
        ),
    );
}

#[test]
fn a10_non_tight_negative_control() {
    const LIMIT_TOL: f64 = 1e-4;
    let ks: Vec<f64> = (0..=16).map(|j| 2f64.powi(j)).collect();
    let set = sample_test_set(1, 20, 3.0, 0.5, 110).unwrap();
    let escaping = convergence_check(&escaping_mass_family(&ks).unwrap(), None, &set, None, 100.0).unwrap();
    let limit_err = set
        .iter()
        .zip(&escaping.limit_values)
        .map(|(b, g)| (&b.inverse().unwrap().scale_re(0.5) - g).operator_norm())
        .fold(0.0, f64::max);

    // Positive control: a tight family must not fire.
    let cauchy = ScalarMeasure::standard_cauchy();
    let tight =
        convergence_check(&truncation_family(&cauchy, 1, &ks).unwrap(), Some(&scalar(cauchy)), &set, None, 100.0)
            .unwrap();
    let ok = escaping.mass_deficit && limit_err <= LIMIT_TOL && !tight.mass_deficit;
    report(
        10,
        "non-tight negative control",
        ok,
        format!(
            "limit vs ½z⁻¹ {limit_err:.2e} (tol {LIMIT_TOL:.0e}), asymptotic mass {:.4}, deficit flagged {}, tight control flagged {}",
            escaping.limit_asymptotic_mass, escaping.mass_deficit, tight.mass_deficit
        ),
    );
}

#[test]
fn a11_determinism() {
    let configs_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut configs: Vec<PathBuf> = std::fs::read_dir(&configs_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    let dir = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for cfg in &configs {
        let outputs: Vec<Vec<u8>> = ["1", "4"]
            .iter()
            .map(|threads| {
                let out = dir.path().join(format!("out-{threads}"));
                let status = Command::new(env!("CARGO_BIN_EXE_ovfree"))
                    .arg("run")
                    .arg(cfg)
                    .arg("--output")
                    .arg(&out)
                    .env("OVFREE_THREADS", threads)
                    .status()
                    .unwrap();
                assert!(status.success(), "{} exited with {status}", cfg.display());
                std::fs::read(&out).unwrap()
            })
            .collect();
        if outputs[0] != outputs[1] {
            mismatched.push(cfg.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    report(
        11,
        "determinism",
        mismatched.is_empty() && !configs.is_empty(),
        format!("{} configs rerun with 1 and 4 threads, mismatches: {mismatched:?}", configs.len()),
    );
}
