//! Mixed resolvent moments `φ((z₁ − X_{i₁})^{-1} ⋯ (z_k − X_{i_k})^{-1})` under
//! equal, classical, Boolean and free independence, and the Neumann-series
//! evaluation of the matrix Cauchy transform of `diag(X₁, …, X_n)`.
//!
//! Every mode reduces to [`single_var_moment`]. For Cauchy laws with all poles
//! on one side it is a single residue; otherwise it uses a partial-fraction
//! decomposition of the resolvent product and the scalar Cauchy transform
//! (plus its derivatives at repeated poles).
//!
//! The free mode evaluates the centering recursion: a product of centered
//! blocks is expanded pairwise, an adjacent pair of same-variable blocks
//! contributing `φ(Q_a Q_b) − φ(Q_a)φ(Q_b)` times the centered product of the
//! remaining blocks, and an alternating centered product contributing zero.
//! The pair step assumes centered products of fewer blocks vanish, which holds
//! for location/scale Cauchy laws only, so other laws are rejected.

use std::collections::HashMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::ScalarMeasure;
use crate::numerics::ComplexMatrix;
use crate::ovdist::{mc_mixed_moment, McOptions};

const POLE_MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndependenceMode {
    Equal,
    Classical,
    Free,
    Boolean,
}

impl IndependenceMode {
    pub const ALL: [IndependenceMode; 4] =
        [IndependenceMode::Equal, IndependenceMode::Classical, IndependenceMode::Free, IndependenceMode::Boolean];

    pub fn name(self) -> &'static str {
        match self {
            Self::Equal => "equal",
            Self::Classical => "classical",
            Self::Free => "free",
            Self::Boolean => "boolean",
        }
    }
}

/// One resolvent factor `(z − X_var)^{-1}`; `var` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letter {
    pub z: Complex64,
    pub var: usize,
}

impl Letter {
    pub fn new(z: Complex64, var: usize) -> Self {
        Self { z, var }
    }
}

/// A product of resolvents together with the laws and the independence mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolventWord {
    pub letters: Vec<Letter>,
    pub laws: Vec<ScalarMeasure>,
    pub mode: IndependenceMode,
    /// Free mode with non-Cauchy laws is delegated to a matrix model only when set.
    pub mc: Option<McOptions>,
}

impl ResolventWord {
    pub fn new(letters: Vec<Letter>, laws: Vec<ScalarMeasure>, mode: IndependenceMode) -> Result<Self> {
        let w = Self { letters, laws, mode, mc: None };
        w.validate()?;
        Ok(w)
    }

    pub fn with_mc(mut self, opts: McOptions) -> Self {
        self.mc = Some(opts);
        self
    }

    fn validate(&self) -> Result<()> {
        for (k, l) in self.letters.iter().enumerate() {
            if !(l.z.im > 0.0) {
                return Err(Error::Invalid(format!("letter {k}: Im z = {} is not positive", l.z.im)));
            }
            if l.var >= self.laws.len() {
                return Err(Error::Invalid(format!("letter {k}: variable {} out of range", l.var + 1)));
            }
        }
        Ok(())
    }
}

/// `∏_j (z_j − t)^{-1} = Σ_p Σ_{r=1}^{m_p} c_{p,r} (λ_p − t)^{-r}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialFraction {
    /// Distinct poles `λ_p` with multiplicity `m_p`.
    pub poles: Vec<(Complex64, usize)>,
    /// `coefficients[p][r - 1] = c_{p,r}`.
    pub coefficients: Vec<Vec<Complex64>>,
}

impl PartialFraction {
    /// Re-sums the decomposition at `t`.
    pub fn evaluate(&self, t: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for ((pole, _), coeffs) in self.poles.iter().zip(&self.coefficients) {
            let inv = 1.0 / (pole - t);
            let mut pow = inv;
            for c in coeffs {
                acc += c * pow;
                pow *= inv;
            }
        }
        acc
    }
}

/// Coefficients of `(u + a)^{-k}` as a power series in `u`, up to degree `deg`.
fn inverse_power_series(a: Complex64, k: usize, deg: usize) -> Vec<Complex64> {
    // [u^s] (u + a)^{-k} = (-1)^s C(k+s-1, s) a^{-k-s}
    let inv_a = 1.0 / a;
    let mut out = Vec::with_capacity(deg + 1);
    let mut coef = inv_a.powi(k as i32);
    for s in 0..=deg {
        out.push(coef);
        let ratio = -((k + s) as f64) / ((s + 1) as f64);
        coef = coef * inv_a * ratio;
    }
    out
}

fn series_mul(a: &[Complex64], b: &[Complex64], deg: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); deg + 1];
    for (i, x) in a.iter().enumerate().take(deg + 1) {
        for (j, y) in b.iter().enumerate().take(deg + 1 - i) {
            out[i + j] += x * y;
        }
    }
    out
}

/// Partial-fraction decomposition of `∏_j (z_j − t)^{-1}`; repeated poles keep
/// one coefficient per power up to their multiplicity.
pub fn partial_fractions(zs: &[Complex64]) -> PartialFraction {
    assert!(!zs.is_empty(), "partial fractions of an empty product");
    let mut poles: Vec<(Complex64, usize)> = Vec::new();
    for &z in zs {
        match poles.iter_mut().find(|(p, _)| (p - z).norm() <= POLE_MERGE_TOL * (1.0 + z.norm())) {
            Some(entry) => entry.1 += 1,
            None => poles.push((z, 1)),
        }
    }
    let coefficients = poles
        .iter()
        .enumerate()
        .map(|(p, &(lp, mp))| {
            let deg = mp - 1;
            let mut h = vec![Complex64::new(0.0, 0.0); deg + 1];
            h[0] = Complex64::new(1.0, 0.0);
            for (q, &(lq, mq)) in poles.iter().enumerate() {
                if q != p {
                    h = series_mul(&h, &inverse_power_series(lq - lp, mq, deg), deg);
                }
            }
            // c_{p,r} = [u^{m_p − r}] h(u)
            (1..=mp).map(|r| h[mp - r]).collect()
        })
        .collect();
    PartialFraction { poles, coefficients }
}

/// `φ((λ − X)^{-r}) = (−1)^{r−1}/(r−1)! · g^{(r−1)}(λ)`.
fn resolvent_power_moment(mu: &ScalarMeasure, lambda: Complex64, r: usize) -> Result<Complex64> {
    let d = mu.g_derivative(lambda, (r - 1) as u32)?;
    let fact: f64 = (1..r).map(|k| k as f64).product();
    let sign = if (r - 1).is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok(d * (sign / fact))
}

/// `φ(∏_j (z_j − X)^{-1})` for a single variable with law `μ`.
pub fn single_var_moment(mu: &ScalarMeasure, zs: &[Complex64]) -> Result<Complex64> {
    if zs.is_empty() {
        return Ok(Complex64::new(1.0, 0.0));
    }
    // Closing the contour in the half plane free of poles leaves the single
    // residue at `location ∓ i·scale`. Partial fractions with high
    // multiplicities cancel catastrophically; this does not.
    if let ScalarMeasure::Cauchy { location, scale } = mu {
        let upper = zs.iter().all(|z| z.im > 0.0);
        if upper || zs.iter().all(|z| z.im < 0.0) {
            let pole = Complex64::new(*location, if upper { -scale } else { *scale });
            return Ok(zs.iter().fold(Complex64::new(1.0, 0.0), |acc, z| acc / (z - pole)));
        }
    }
    let pf = partial_fractions(zs);
    let mut acc = Complex64::new(0.0, 0.0);
    for ((pole, _), coeffs) in pf.poles.iter().zip(&pf.coefficients) {
        for (r, c) in coeffs.iter().enumerate() {
            acc += c * resolvent_power_moment(mu, *pole, r + 1)?;
        }
    }
    Ok(acc)
}

/// Maximal runs of equal variable index.
fn blocks(letters: &[Letter]) -> Vec<(usize, Vec<Complex64>)> {
    let mut out: Vec<(usize, Vec<Complex64>)> = Vec::new();
    for l in letters {
        match out.last_mut() {
            Some((v, zs)) if *v == l.var => zs.push(l.z),
            _ => out.push((l.var, vec![l.z])),
        }
    }
    out
}

/// Evaluates a mixed resolvent moment in the word's independence mode.
pub fn mixed_moment(word: &ResolventWord) -> Result<Complex64> {
    word.validate()?;
    let one = Complex64::new(1.0, 0.0);
    if word.letters.is_empty() {
        return Ok(one);
    }
    match word.mode {
        IndependenceMode::Equal => {
            let first = &word.laws[word.letters[0].var];
            if let Some(l) = word.letters.iter().find(|l| &word.laws[l.var] != first) {
                return Err(Error::Invalid(format!("equal mode needs identical laws; variable {} differs", l.var + 1)));
            }
            let zs: Vec<Complex64> = word.letters.iter().map(|l| l.z).collect();
            single_var_moment(first, &zs)
        }
        IndependenceMode::Classical => {
            let mut groups: Vec<(usize, Vec<Complex64>)> = Vec::new();
            for l in &word.letters {
                match groups.iter_mut().find(|(v, _)| *v == l.var) {
                    Some((_, zs)) => zs.push(l.z),
                    None => groups.push((l.var, vec![l.z])),
                }
            }
            groups.iter().try_fold(one, |acc, (v, zs)| Ok(acc * single_var_moment(&word.laws[*v], zs)?))
        }
        IndependenceMode::Boolean => {
            blocks(&word.letters).iter().try_fold(one, |acc, (v, zs)| Ok(acc * single_var_moment(&word.laws[*v], zs)?))
        }
        IndependenceMode::Free => {
            if let Some(l) = word.letters.iter().find(|l| !word.laws[l.var].is_cauchy_family()) {
                return match &word.mc {
                    Some(opts) => Ok(mc_mixed_moment(&word.letters, &word.laws, opts)?.0),
                    None => Err(Error::FreeModeUnsupportedLaw { var: l.var + 1, law: word.laws[l.var].label() }),
                };
            }
            FreeEvaluator::new(&word.laws, blocks(&word.letters)).evaluate()
        }
    }
}

/// Interval recursion over the block sequence `M_1 ⋯ M_ℓ`.
///
/// `balanced(base, a, b)` sums over the blocks in `[a, b)`: each block is
/// either replaced by its moment or centered and paired with a later
/// same-variable centered block; a centered block may not pair through the
/// block beneath it (`base`), mirroring the left-to-right pair reduction.
struct FreeEvaluator<'a> {
    laws: &'a [ScalarMeasure],
    blocks: Vec<(usize, Vec<Complex64>)>,
    block_moments: Vec<Complex64>,
    word_memo: HashMap<(usize, Vec<(u64, u64)>), Complex64>,
    balanced_memo: HashMap<(Option<usize>, usize, usize), Complex64>,
}

impl<'a> FreeEvaluator<'a> {
    fn new(laws: &'a [ScalarMeasure], blocks: Vec<(usize, Vec<Complex64>)>) -> Self {
        Self { laws, blocks, block_moments: Vec::new(), word_memo: HashMap::new(), balanced_memo: HashMap::new() }
    }

    fn sub_word_moment(&mut self, var: usize, zs: &[Complex64]) -> Result<Complex64> {
        let key = (var, zs.iter().map(|z| (z.re.to_bits(), z.im.to_bits())).collect::<Vec<_>>());
        if let Some(v) = self.word_memo.get(&key) {
            return Ok(*v);
        }
        let v = single_var_moment(&self.laws[var], zs)?;
        self.word_memo.insert(key, v);
        Ok(v)
    }

    fn evaluate(mut self) -> Result<Complex64> {
        let blocks = self.blocks.clone();
        self.block_moments = blocks.iter().map(|(v, zs)| self.sub_word_moment(*v, zs)).collect::<Result<_>>()?;
        self.balanced(None, 0, blocks.len())
    }

    fn pair_factor(&mut self, a: usize, b: usize) -> Result<Complex64> {
        let var = self.blocks[a].0;
        let mut zs = self.blocks[a].1.clone();
        zs.extend_from_slice(&self.blocks[b].1);
        let joint = self.sub_word_moment(var, &zs)?;
        Ok(joint - self.block_moments[a] * self.block_moments[b])
    }

    fn balanced(&mut self, base: Option<usize>, a: usize, b: usize) -> Result<Complex64> {
        if a >= b {
            return Ok(Complex64::new(1.0, 0.0));
        }
        if let Some(v) = self.balanced_memo.get(&(base, a, b)) {
            return Ok(*v);
        }
        let var_a = self.blocks[a].0;
        let mut total = self.block_moments[a] * self.balanced(base, a + 1, b)?;
        if base != Some(var_a) {
            for j in (a + 1)..b {
                if self.blocks[j].0 == var_a {
                    let f = self.pair_factor(a, j)?;
                    let inner = self.balanced(Some(var_a), a + 1, j)?;
                    let rest = self.balanced(base, j + 1, b)?;
                    total += f * inner * rest;
                }
            }
        }
        self.balanced_memo.insert((base, a, b), total);
        Ok(total)
    }
}

/// The four mode values for standard Cauchy variables and the reference `∏ (z_j + i)^{-1}`.
#[derive(Debug, Clone, Serialize)]
pub struct FbcsReport {
    pub equal: Complex64,
    pub classical: Complex64,
    pub free: Complex64,
    pub boolean: Complex64,
    pub reference: Complex64,
}

impl FbcsReport {
    pub fn values(&self) -> [(IndependenceMode, Complex64); 4] {
        [
            (IndependenceMode::Equal, self.equal),
            (IndependenceMode::Classical, self.classical),
            (IndependenceMode::Free, self.free),
            (IndependenceMode::Boolean, self.boolean),
        ]
    }

    pub fn max_deviation(&self) -> f64 {
        self.values().iter().map(|(_, v)| (v - self.reference).norm()).fold(0.0, f64::max)
    }
}

/// Evaluates one word of standard Cauchy variables in all four modes.
/// `indices` are one-based variable labels.
pub fn fbcs_check(zs: &[Complex64], indices: &[usize]) -> Result<FbcsReport> {
    if zs.len() != indices.len() {
        return Err(Error::DimensionMismatch { expected: zs.len(), got: indices.len() });
    }
    if indices.contains(&0) {
        return Err(Error::Invalid("variable indices are one-based".into()));
    }
    let nvars = indices.iter().copied().max().unwrap_or(1);
    let laws = vec![ScalarMeasure::standard_cauchy(); nvars];
    let letters: Vec<Letter> = zs.iter().zip(indices).map(|(&z, &i)| Letter::new(z, i - 1)).collect();
    let eval = |mode| mixed_moment(&ResolventWord::new(letters.clone(), laws.clone(), mode)?);
    let reference = zs.iter().fold(Complex64::new(1.0, 0.0), |acc, z| acc / (z + Complex64::new(0.0, 1.0)));
    Ok(FbcsReport {
        equal: eval(IndependenceMode::Equal)?,
        classical: eval(IndependenceMode::Classical)?,
        free: eval(IndependenceMode::Free)?,
        boolean: eval(IndependenceMode::Boolean)?,
        reference,
    })
}

/// Diagonal-dominance data for the Neumann expansion at `B = D + B'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dominance {
    /// `‖B'‖ / min_ℓ Im d_ℓ`.
    pub q: f64,
    pub min_imag_diag: f64,
}

pub fn neumann_dominance(b: &ComplexMatrix) -> Dominance {
    let diag = b.diagonal();
    let min_im = diag.iter().map(|d| d.im).fold(f64::INFINITY, f64::min);
    let off = b - &ComplexMatrix::from_diagonal(&diag);
    let q = if min_im > 0.0 { off.operator_norm() / min_im } else { f64::INFINITY };
    Dominance { q, min_imag_diag: min_im }
}

/// Tail bound `q^{p+1}/(1−q) · 1/min Im d` of the truncated series.
pub fn neumann_tail_bound(dom: Dominance, p_max: usize) -> f64 {
    dom.q.powi(p_max as i32 + 1) / (1.0 - dom.q) / dom.min_imag_diag
}

/// Number of index paths the expansion up to `p_max` visits.
pub fn neumann_path_count(b: &ComplexMatrix, p_max: usize) -> f64 {
    let m = b.dim();
    let nz: Vec<Vec<bool>> =
        (0..m).map(|i| (0..m).map(|j| i != j && b.get(i, j) != Complex64::new(0.0, 0.0)).collect()).collect();
    let mut counts = vec![1.0_f64; m];
    let mut total = m as f64;
    for _ in 0..p_max {
        counts = (0..m).map(|j| (0..m).filter(|&i| nz[i][j]).map(|i| counts[i]).sum()).collect();
        total += counts.iter().sum::<f64>();
    }
    total
}

/// `E[(B − X⊗1_k)^{-1}]` for `X = diag(X₁, …, X_n)` by the Neumann series
/// `Σ_{p ≤ p_max} E[(D−X)^{-1} (−B'(D−X)^{-1})^p]`, each entry of each term
/// expanded into [`mixed_moment`] calls. Index `ℓ` of `B` carries variable `ℓ mod n`.
pub fn matrix_g_via_neumann(
    b: &ComplexMatrix,
    laws: &[ScalarMeasure],
    mode: IndependenceMode,
    p_max: usize,
) -> Result<(ComplexMatrix, f64)> {
    let n = laws.len();
    let m = b.dim();
    if n == 0 || !m.is_multiple_of(n) {
        return Err(Error::DimensionMismatch { expected: n, got: m });
    }
    let dom = neumann_dominance(b);
    if !(dom.min_imag_diag > 0.0) || !(dom.q < 1.0) {
        return Err(Error::NotDominant { q: dom.q });
    }
    let diag = b.diagonal();
    let mut g = ComplexMatrix::zeros(m);
    let mut path = Vec::with_capacity(p_max + 1);
    for start in 0..m {
        path.clear();
        path.push(start);
        expand_paths(b, &diag, laws, mode, p_max, &mut path, Complex64::new(1.0, 0.0), &mut g)?;
    }
    Ok((g, neumann_tail_bound(dom, p_max)))
}

#[allow(clippy::too_many_arguments)]
fn expand_paths(
    b: &ComplexMatrix,
    diag: &[Complex64],
    laws: &[ScalarMeasure],
    mode: IndependenceMode,
    p_max: usize,
    path: &mut Vec<usize>,
    weight: Complex64,
    out: &mut ComplexMatrix,
) -> Result<()> {
    let n = laws.len();
    let letters: Vec<Letter> = path.iter().map(|&l| Letter::new(diag[l], l % n)).collect();
    let word = ResolventWord { letters, laws: laws.to_vec(), mode, mc: None };
    let value = weight * mixed_moment(&word)?;
    let (first, last) = (path[0], *path.last().expect("non-empty path"));
    out.set(first, last, out.get(first, last) + value);
    if path.len() > p_max {
        return Ok(());
    }
    for next in 0..b.dim() {
        let e = b.get(last, next);
        if next != last && e != Complex64::new(0.0, 0.0) {
            path.push(next);
            expand_paths(b, diag, laws, mode, p_max, path, -weight * e, out)?;
            path.pop();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::c64;

    const IM: Complex64 = Complex64::new(0.0, 1.0);

    fn cauchy_word(letters: &[(Complex64, usize)], mode: IndependenceMode) -> ResolventWord {
        let nvars = letters.iter().map(|l| l.1).max().unwrap() + 1;
        ResolventWord::new(
            letters.iter().map(|&(z, v)| Letter::new(z, v)).collect(),
            vec![ScalarMeasure::standard_cauchy(); nvars],
            mode,
        )
        .unwrap()
    }

    #[test]
    fn partial_fraction_examples() {
        let pf = partial_fractions(&[c64(0.3, 1.0)]);
        assert_eq!(pf.coefficients, vec![vec![c64(1.0, 0.0)]]);

        let (z1, z2) = (c64(0.0, 1.0), c64(1.0, 2.0));
        let pf = partial_fractions(&[z1, z2]);
        assert!((pf.coefficients[0][0] - 1.0 / (z2 - z1)).norm() < 1e-15);
        assert!((pf.coefficients[1][0] - 1.0 / (z1 - z2)).norm() < 1e-15);

        let pf = partial_fractions(&[c64(0.0, 1.0), c64(0.0, 2.0), c64(0.0, 3.0)]);
        let expect = [-0.5, 1.0, -0.5];
        for (c, e) in pf.coefficients.iter().zip(expect) {
            assert!((c[0] - c64(e, 0.0)).norm() < 1e-14, "{c:?}");
        }
    }

    #[test]
    fn partial_fraction_resummation_with_repeats() {
        let zs = [c64(0.1, 1.0), c64(0.1, 1.0), c64(-0.5, 0.4), c64(2.0, 0.7), c64(-0.5, 0.4), c64(0.1, 1.0)];
        let pf = partial_fractions(&zs);
        assert_eq!(pf.poles.len(), 3);
        for k in 0..20 {
            let t = c64(-3.0 + 0.3 * k as f64, 0.0);
            let direct = zs.iter().fold(c64(1.0, 0.0), |a, z| a / (z - t));
            assert!((pf.evaluate(t) - direct).norm() <= 1e-10 * direct.norm().max(1.0));
        }
    }

    #[test]
    fn single_var_examples() {
        let v = single_var_moment(&ScalarMeasure::standard_cauchy(), &[c64(0.0, 2.0), c64(0.0, 3.0)]).unwrap();
        assert!((v - c64(-1.0 / 12.0, 0.0)).norm() < 1e-15);
        let v = single_var_moment(&ScalarMeasure::point_mass(0.0), &[c64(0.0, 1.0), c64(0.0, 2.0)]).unwrap();
        assert!((v - c64(-0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn repeated_pole_matches_perturbed_limit() {
        // Oracle: split the double pole by ±ε and Richardson-extrapolate ε → 0.
        let mu = ScalarMeasure::semicircle(1.0);
        let z = c64(0.0, 2.0);
        let exact = single_var_moment(&mu, &[z, z]).unwrap();
        let perturbed = |eps: f64| single_var_moment(&mu, &[z + eps, z - eps]).unwrap();
        let (a, b) = (perturbed(1e-3), perturbed(5e-4));
        let extrapolated = (4.0 * b - a) / 3.0;
        assert!((exact - extrapolated).norm() < 1e-7, "{exact} vs {extrapolated}");
    }

    #[test]
    fn equal_poles_give_derivative_identity() {
        let mu = ScalarMeasure::semicircle(2.0);
        let z0 = c64(0.4, 1.3);
        for k in 1..=4usize {
            let v = single_var_moment(&mu, &vec![z0; k]).unwrap();
            let d = mu.g_derivative(z0, (k - 1) as u32).unwrap();
            let fact: f64 = (1..k).map(|x| x as f64).product();
            let sign = if (k - 1) % 2 == 0 { 1.0 } else { -1.0 };
            assert!((v - d * sign / fact).norm() < 1e-12);
        }
    }

    #[test]
    fn mixed_moment_examples() {
        let word = [(c64(0.0, 2.0), 0), (c64(0.0, 3.0), 1)];
        for mode in [IndependenceMode::Free, IndependenceMode::Boolean] {
            let v = mixed_moment(&cauchy_word(&word, mode)).unwrap();
            assert!((v - c64(-1.0 / 12.0, 0.0)).norm() < 1e-14);
        }
        let w = ResolventWord::new(
            vec![Letter::new(IM, 0), Letter::new(IM, 1)],
            vec![ScalarMeasure::point_mass(1.0), ScalarMeasure::point_mass(2.0)],
            IndependenceMode::Classical,
        )
        .unwrap();
        let v = mixed_moment(&w).unwrap();
        assert!((v - 1.0 / ((IM - 1.0) * (IM - 2.0))).norm() < 1e-15);
    }

    #[test]
    fn free_mode_rejects_non_cauchy() {
        let w = ResolventWord::new(
            vec![Letter::new(IM, 0), Letter::new(IM, 1)],
            vec![ScalarMeasure::semicircle(1.0), ScalarMeasure::standard_cauchy()],
            IndependenceMode::Free,
        )
        .unwrap();
        assert!(matches!(mixed_moment(&w), Err(Error::FreeModeUnsupportedLaw { var: 1, .. })));
    }

    #[test]
    fn free_recursion_reproduces_known_free_formula() {
        // φ(a₁ b a₂) = φ(b) φ(a₁ a₂) for free a, b.
        let laws = vec![ScalarMeasure::cauchy(0.3, 0.5), ScalarMeasure::cauchy(-1.0, 2.0)];
        let (z1, z2, z3) = (c64(0.2, 1.0), c64(-0.4, 0.6), c64(1.1, 0.9));
        let w = ResolventWord::new(
            vec![Letter::new(z1, 0), Letter::new(z2, 1), Letter::new(z3, 0)],
            laws.clone(),
            IndependenceMode::Free,
        )
        .unwrap();
        let lhs = mixed_moment(&w).unwrap();
        let rhs = single_var_moment(&laws[1], &[z2]).unwrap() * single_var_moment(&laws[0], &[z1, z3]).unwrap();
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn fbcs_examples() {
        let r = fbcs_check(&[c64(0.0, 2.0), c64(0.0, 3.0)], &[1, 2]).unwrap();
        assert!(r.max_deviation() < 1e-14);
        assert!((r.reference - c64(-1.0 / 12.0, 0.0)).norm() < 1e-15);
        let r = fbcs_check(&[c64(0.0, 2.0)], &[1]).unwrap();
        assert!((r.free - 1.0 / c64(0.0, 3.0)).norm() < 1e-15);
    }

    #[test]
    fn neumann_examples() {
        let laws = vec![ScalarMeasure::standard_cauchy(); 2];
        let b = ComplexMatrix::from_diagonal(&[c64(0.5, 2.0), c64(-1.0, 0.7)]);
        let (g, tail) = matrix_g_via_neumann(&b, &laws, IndependenceMode::Free, 0).unwrap();
        let expect = b.shift(IM).inverse().unwrap();
        assert!((&g - &expect).max_abs_entry() < 1e-15);
        assert_eq!(tail, 0.0);

        let b = ComplexMatrix::from_rows(&[vec![c64(0.0, 2.0), c64(0.1, 0.0)], vec![c64(0.1, 0.0), c64(0.0, 3.0)]])
            .unwrap();
        let expect = b.shift(IM).inverse().unwrap();
        for mode in [IndependenceMode::Free, IndependenceMode::Boolean] {
            let (g, tail) = matrix_g_via_neumann(&b, &laws, mode, 12).unwrap();
            assert!(tail <= 1e-8);
            assert!(
                (&g - &expect).operator_norm() <= tail.max(1e-14),
                "{mode:?} {} {tail}",
                (&g - &expect).operator_norm()
            );
        }
    }

    #[test]
    fn neumann_rejects_non_dominant() {
        let laws = vec![ScalarMeasure::standard_cauchy(); 2];
        let b = ComplexMatrix::from_rows(&[vec![c64(0.0, 1.0), c64(2.0, 0.0)], vec![c64(2.0, 0.0), c64(0.0, 1.0)]])
            .unwrap();
        assert!(matches!(matrix_g_via_neumann(&b, &laws, IndependenceMode::Free, 4), Err(Error::NotDominant { .. })));
    }
}
