//! Command execution: config in, artifact out.

use num_complex::Complex64;
use ovfree::convolution::{
    convergence_check, escaping_mass_family, eval_g_of_sum, sample_test_set, suggest_lambda, truncation_family,
    truncation_sweep, ConvolutionTask,
};
use ovfree::killer::{build_killer, halfplane_check, killer_derivative, non_invertibility_witness};
use ovfree::moments::{fbcs_check, matrix_g_via_neumann, mixed_moment, neumann_dominance, neumann_tail_bound};
use ovfree::ovdist::{eval_g, mc_estimate_g};
use ovfree::transforms::{
    alternating_target, bloch_certify, block_resolvent_identity_check, r_transform, sample_block_points,
};
use ovfree::{BasePoint, ComplexMatrix, Letter, OVDistribution, ResolventWord, ScalarMeasure};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::config::*;
use crate::output::{num, Artifact};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Numeric(#[from] ovfree::Error),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numeric(_) | CliError::Check(_) => 3,
            CliError::Io(_) | CliError::Verify(_) => 1,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn report(&self) -> Value {
        let kind = match self {
            CliError::Schema(_) => "SchemaError",
            CliError::Numeric(e) => e.kind(),
            CliError::Check(_) => "CheckFailed",
            CliError::Io(_) => "IoError",
            CliError::Verify(_) => "VerifyFailed",
        };
        json!({ "error": { "kind": kind, "message": self.to_string() } })
    }
}

/// The artifact, plus a failed post-condition that should still be reported
/// after the artifact is written.
pub struct Outcome {
    pub artifact: Artifact,
    pub failure: Option<String>,
}

impl From<Artifact> for Outcome {
    fn from(artifact: Artifact) -> Self {
        Outcome { artifact, failure: None }
    }
}

fn params<P: DeserializeOwned>(cfg: &ExperimentConfig) -> Result<P, CliError> {
    let v = if cfg.params.is_null() { json!({}) } else { cfg.params.clone() };
    serde_json::from_value(v).map_err(|e| CliError::Schema(format!("{}: {e}", cfg.command.name())))
}

fn checked(dist: OVDistribution) -> Result<OVDistribution, CliError> {
    dist.validate().map_err(|e| CliError::Schema(e.to_string()))?;
    Ok(dist)
}

fn cx(z: Complex64) -> Value {
    json!([z.re, z.im])
}

fn matrix_rows(id: usize, m: &ComplexMatrix, rows: &mut Vec<Vec<String>>) {
    for r in 0..m.dim() {
        for c in 0..m.dim() {
            let z = m.get(r, c);
            rows.push(vec![id.to_string(), r.to_string(), c.to_string(), num(z.re), num(z.im)]);
        }
    }
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match cfg.command {
        Command::GEval => g_eval(cfg),
        Command::REval => r_eval(cfg),
        Command::Certify => certify(cfg),
        Command::Convolve => convolve(cfg),
        Command::TruncateSweep => truncate(cfg),
        Command::Moments => moments(cfg),
        Command::Fbcs => fbcs(cfg),
        Command::Neumann => neumann(cfg),
        Command::Killer => killer(cfg),
        Command::BlockIdentity => block_identity(cfg),
        Command::Convergence => convergence(cfg),
    }
}

fn g_eval(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: GEvalParams = params(cfg)?;
    let dist = checked(p.dist)?;
    let values = p
        .points
        .par_iter()
        .map(|pt| eval_g(&dist, &pt.to_matrix(dist.base_dim)))
        .collect::<ovfree::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (id, g) in values.iter().enumerate() {
        matrix_rows(id, g, &mut rows);
    }
    Ok(Artifact::Csv { header: header(&["point_id", "row", "col", "re", "im"]), rows }.into())
}

fn ball_for(p: BallParams) -> Result<(OVDistribution, ovfree::CertifiedBall), CliError> {
    let dist = checked(p.dist)?;
    let base = BasePoint::new(p.n, dist.base_dim, p.lambda).map_err(|e| CliError::Schema(e.to_string()))?;
    let ball = bloch_certify(&dist, &base, p.big_r.unwrap_or(p.lambda / 2.0))?;
    Ok((dist, ball))
}

fn r_eval(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: REvalParams = params(cfg)?;
    let n = p.ball.n;
    let (dist, ball) = ball_for(p.ball)?;
    let full = ball.center.dim();
    let targets = p
        .targets
        .iter()
        .map(|t| {
            let m = t.to_matrix(dist.base_dim);
            if m.dim() == dist.base_dim {
                Ok(alternating_target(&m, n))
            } else if m.dim() == full {
                Ok(m)
            } else {
                Err(CliError::Schema(format!("target of size {} fits neither {} nor {full}", m.dim(), dist.base_dim)))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = targets.par_iter().map(|w| r_transform(&dist, w, &ball)).collect::<ovfree::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (id, r) in values.iter().enumerate() {
        matrix_rows(id, r, &mut rows);
    }
    Ok(Artifact::Csv { header: header(&["point_id", "row", "col", "re", "im"]), rows }.into())
}

fn certify(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: BallParams = params(cfg)?;
    let (n, lambda) = (p.n, p.lambda);
    let (dist, ball) = ball_for(p)?;
    let cert = serde_json::to_value(&ball).expect("certificate serializes");
    Ok(Artifact::Json(json!({
        "base": { "n": n, "base_dim": dist.base_dim, "lambda": lambda },
        "certificate": cert,
    }))
    .into())
}

fn convolve(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: ConvolveParams = params(cfg)?;
    if p.sum.is_some() && p.mc.is_some() {
        return Err(CliError::Schema("convolve: give at most one of `sum` and `mc`".into()));
    }
    let (x, y) = (checked(p.x)?, checked(p.y)?);
    if x.base_dim != y.base_dim {
        return Err(CliError::Schema("convolve: x and y must share base_dim".into()));
    }
    let sum = p.sum.map(checked).transpose()?;
    if let Some(spec) = &p.mc {
        spec.validate().map_err(|e| CliError::Schema(e.to_string()))?;
    }
    let s = x.base_dim;
    let results = p
        .points
        .par_iter()
        .map(|pt| -> ovfree::Result<(ComplexMatrix, Option<(f64, f64)>)> {
            let b = pt.to_matrix(s);
            let emb = alternating_target(&b, 1);
            let lambda = match p.lambda {
                Some(l) => l,
                None => suggest_lambda(&x, &y, &emb, 1)?,
            };
            let task = ConvolutionTask::new(x.clone(), y.clone(), None, &BasePoint::new(1, s, lambda)?, lambda / 2.0)?;
            let g = eval_g_of_sum(&task, &emb)?.block(s, s, s);
            let check = if let Some(sum) = &sum {
                Some(((&g - &eval_g(sum, &b)?).max_abs_entry(), 0.0))
            } else if let Some(spec) = &p.mc {
                let est = mc_estimate_g(spec, &b)?;
                Some(((&g - &est.mean).max_abs_entry(), 3.0 * est.stderr))
            } else {
                None
            };
            Ok((g, check))
        })
        .collect::<ovfree::Result<Vec<_>>>()?;

    let mut cols = vec!["point_id".to_string()];
    for r in 0..s {
        for c in 0..s {
            cols.push(format!("g_re_{r}_{c}"));
            cols.push(format!("g_im_{r}_{c}"));
        }
    }
    cols.push("discrepancy".into());
    cols.push("stderr_budget".into());
    let mut failure = None;
    let rows = results
        .iter()
        .enumerate()
        .map(|(id, (g, check))| {
            let mut row = vec![id.to_string()];
            for r in 0..s {
                for c in 0..s {
                    row.push(num(g.get(r, c).re));
                    row.push(num(g.get(r, c).im));
                }
            }
            match check {
                Some((d, budget)) => {
                    if p.mc.is_some() && d > budget {
                        failure = Some(format!("point {id}: discrepancy {d:e} exceeds 3·stderr {budget:e}"));
                    }
                    row.push(num(*d));
                    row.push(num(*budget));
                }
                None => row.extend([String::new(), String::new()]),
            }
            row
        })
        .collect();
    Ok(Outcome { artifact: Artifact::Csv { header: cols, rows }, failure })
}

fn truncate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: TruncateParams = params(cfg)?;
    let cutoffs = match (p.cutoffs, p.k_max) {
        (Some(c), None) => c,
        (None, Some(k)) => (1..=k).map(f64::from).collect(),
        _ => return Err(CliError::Schema("truncate-sweep: give exactly one of `cutoffs` and `k_max`".into())),
    };
    let rows = truncation_sweep(&p.law.0, &p.b.to_matrix(1), &cutoffs, p.c_bound, p.r)?;
    let failure = rows
        .iter()
        .find(|r| !r.within_bound)
        .map(|r| format!("k = {}: error {:e} exceeds bound {:e}", r.k, r.error, r.bound));
    let rows = rows
        .iter()
        .map(|r| vec![num(r.k), num(r.retained_mass), num(r.error), num(r.bound), r.within_bound.to_string()])
        .collect();
    Ok(Outcome {
        artifact: Artifact::Csv { header: header(&["k", "retained_mass", "error", "bound", "within_bound"]), rows },
        failure,
    })
}

fn laws_for(word: &Word, law: Option<Law>, laws: Option<Vec<Law>>) -> Result<Vec<ScalarMeasure>, CliError> {
    let nvars = word.0.iter().map(|(_, k)| *k).max().unwrap_or(1);
    match (law, laws) {
        (Some(l), None) => Ok(vec![l.0; nvars]),
        (None, Some(ls)) if ls.len() >= nvars => Ok(ls.into_iter().map(|l| l.0).collect()),
        (None, Some(ls)) => Err(CliError::Schema(format!("word uses {nvars} variables, {} laws given", ls.len()))),
        _ => Err(CliError::Schema("give exactly one of `law` and `laws`".into())),
    }
}

fn moments(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: MomentsParams = params(cfg)?;
    let laws = laws_for(&p.word, p.law, p.laws)?;
    let letters: Vec<Letter> = p.word.0.iter().map(|&(z, k)| Letter::new(z, k - 1)).collect();
    let mut word = ResolventWord::new(letters, laws.clone(), p.mode).map_err(|e| CliError::Schema(e.to_string()))?;
    if let Some(mc) = p.mc {
        word = word.with_mc(mc);
    }
    let value = mixed_moment(&word)?;
    // Cauchy-family words take the same value in every mode: the product of the scalar transforms.
    let reference = if p.word.0.iter().all(|(_, k)| laws[k - 1].is_cauchy_family()) {
        let r = p.word.0.iter().try_fold(Complex64::new(1.0, 0.0), |acc, (z, k)| laws[k - 1].g(*z).map(|g| acc * g))?;
        cx(r)
    } else {
        Value::Null
    };
    Ok(Artifact::Json(json!({ "value": cx(value), "mode": p.mode.name(), "reference": reference })).into())
}

fn fbcs(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: FbcsParams = params(cfg)?;
    let zs: Vec<Complex64> = p.word.0.iter().map(|(z, _)| *z).collect();
    let idx: Vec<usize> = p.word.0.iter().map(|(_, k)| *k).collect();
    let rep = fbcs_check(&zs, &idx)?;
    let mut rows: Vec<Vec<String>> =
        rep.values().iter().map(|(m, v)| vec![m.name().to_string(), num(v.re), num(v.im)]).collect();
    rows.push(vec!["reference".into(), num(rep.reference.re), num(rep.reference.im)]);
    let failure = (rep.max_deviation() > 1e-9).then(|| format!("modes disagree by {:e}", rep.max_deviation()));
    Ok(Outcome { artifact: Artifact::Csv { header: header(&["mode", "re", "im"]), rows }, failure })
}

fn neumann(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: NeumannParams = params(cfg)?;
    let laws: Vec<ScalarMeasure> = p.laws.into_iter().map(|l| l.0).collect();
    let p_max = match p.p_max {
        Some(k) => k,
        None => {
            let dom = neumann_dominance(&p.b);
            (0..=400).find(|&k| neumann_tail_bound(dom, k) <= 1e-12).unwrap_or(400)
        }
    };
    let (g, tail) = matrix_g_via_neumann(&p.b, &laws, p.mode, p_max)?;
    let standard = laws.iter().all(|l| *l == ScalarMeasure::standard_cauchy());
    let reference = if standard { Some(p.b.shift(Complex64::new(0.0, 1.0)).inverse()?) } else { None };
    let mut rows = Vec::new();
    for r in 0..g.dim() {
        for c in 0..g.dim() {
            let z = g.get(r, c);
            let (rr, ri) = match &reference {
                Some(m) => (num(m.get(r, c).re), num(m.get(r, c).im)),
                None => (String::new(), String::new()),
            };
            rows.push(vec![r.to_string(), c.to_string(), num(z.re), num(z.im), rr, ri, num(tail), p_max.to_string()]);
        }
    }
    let failure = reference.as_ref().and_then(|m| {
        let d = (&g - m).operator_norm();
        (d > tail + 1e-12).then(|| format!("deviation {d:e} exceeds tail bound {tail:e}"))
    });
    Ok(Outcome {
        artifact: Artifact::Csv {
            header: header(&["row", "col", "re", "im", "reference_re", "reference_im", "tail_bound", "p_max"]),
            rows,
        },
        failure,
    })
}

fn killer(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: KillerParams = params(cfg)?;
    let f = build_killer(&p.targets.0).map_err(|e| CliError::Schema(e.to_string()))?;
    let max_der = f.targets.iter().map(|z| killer_derivative(&f, *z).norm()).fold(0.0, f64::max);
    let min_inc = halfplane_check(&f, p.samples, cfg.seed);
    let witnesses = f
        .targets
        .iter()
        .map(|z| non_invertibility_witness(&f, *z, p.delta.min(0.5 * z.im)))
        .collect::<ovfree::Result<Vec<_>>>()?;
    let failure = if max_der > 1e-8 {
        Some(format!("|F'| = {max_der:e} at a target"))
    } else if min_inc < 0.0 {
        Some("half-plane preservation failed".into())
    } else {
        witnesses.iter().find(|w| !w.quadratic_contact).map(|w| format!("no quadratic contact at {}", w.point))
    };
    let result = json!({
        "stages": f.stages,
        "targets": f.targets.iter().map(|z| cx(*z)).collect::<Vec<_>>(),
        "max_abs_derivative_at_targets": max_der,
        "halfplane_check": { "samples": p.samples, "min_increment": min_inc, "ok": min_inc >= 0.0 },
        "witnesses": witnesses.iter().map(|w| json!({
            "point": cx(w.point),
            "delta": w.delta,
            "contact_constant": w.contact_constant,
            "second_derivative": w.second_derivative,
            "contact_resolved": w.contact_resolved,
            "quadratic_contact": w.quadratic_contact,
            "pair_image_distance": w.pair_image_distance,
        })).collect::<Vec<_>>(),
    });
    Ok(Outcome { artifact: Artifact::Json(result), failure })
}

fn block_identity(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: BlockIdentityParams = params(cfg)?;
    let mut points = p.b;
    if let Some(r) = p.random {
        points.extend(sample_block_points(r.dim, r.count, r.inv_norm, cfg.seed));
    }
    if points.is_empty() {
        return Err(CliError::Schema("block-identity: no points (`b` or `random`)".into()));
    }
    let dist = OVDistribution::scalar_embedded(1, p.law.0)?;
    let disc =
        points.par_iter().map(|b| block_resolvent_identity_check(&dist, b)).collect::<ovfree::Result<Vec<_>>>()?;
    let failure = disc.iter().position(|d| *d > 1e-9).map(|i| format!("point {i}: discrepancy {:e}", disc[i]));
    let rows = disc.iter().enumerate().map(|(i, d)| vec![i.to_string(), num(*d)]).collect();
    Ok(Outcome { artifact: Artifact::Csv { header: header(&["point_id", "discrepancy"]), rows }, failure })
}

fn convergence(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: ConvergenceParams = params(cfg)?;
    let family = match p.family {
        FamilySpec::Truncations { law, ks } => truncation_family(&law.0, 1, &ks),
        FamilySpec::EscapingMass { ks } => escaping_mass_family(&ks),
        FamilySpec::Explicit { members } => Ok(members),
    }
    .map_err(|e| CliError::Schema(e.to_string()))?;
    let family = family.into_iter().map(checked).collect::<Result<Vec<_>, _>>()?;
    let dim = family.first().map(|d| d.base_dim).unwrap_or(1);
    let set = match p.test_set {
        TestSetSpec::Points(ExplicitSet { points }) => points.iter().map(|pt| pt.to_matrix(dim)).collect(),
        TestSetSpec::Random(r) => sample_test_set(r.dim, r.count, r.c_bound, r.r, cfg.seed)?,
    };
    let limit = p.limit.map(checked).transpose()?;
    let rep = convergence_check(&family, limit.as_ref(), &set, p.envelope.as_deref(), p.probe_height)?;
    Ok(Artifact::Json(serde_json::to_value(&rep).expect("report serializes")).into())
}
