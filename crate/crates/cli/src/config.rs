//! Experiment configs: the JSON accepted by `ovfree run`, plus the small
//! textual grammars for complex numbers and resolvent words.

use std::path::PathBuf;

use num_complex::Complex64;
use ovfree::{ComplexMatrix, IndependenceMode, MatrixModelSpec, McOptions, OVDistribution, ScalarMeasure};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GEval,
    REval,
    Certify,
    Convolve,
    TruncateSweep,
    Moments,
    Fbcs,
    Neumann,
    Killer,
    BlockIdentity,
    Convergence,
}

impl Command {
    pub const ALL: [Command; 11] = [
        Command::GEval,
        Command::REval,
        Command::Certify,
        Command::Convolve,
        Command::TruncateSweep,
        Command::Moments,
        Command::Fbcs,
        Command::Neumann,
        Command::Killer,
        Command::BlockIdentity,
        Command::Convergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GEval => "g-eval",
            Command::REval => "r-eval",
            Command::Certify => "certify",
            Command::Convolve => "convolve",
            Command::TruncateSweep => "truncate-sweep",
            Command::Moments => "moments",
            Command::Fbcs => "fbcs",
            Command::Neumann => "neumann",
            Command::Killer => "killer",
            Command::BlockIdentity => "block-identity",
            Command::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON of `command`, `seed` and `params`
    /// (object keys sorted); the output path does not enter the hash.
    pub fn hash(&self) -> String {
        let canonical = serde_json::json!({
            "command": self.command,
            "seed": self.seed,
            "params": self.params,
        });
        let bytes = serde_json::to_vec(&canonical).expect("JSON values always serialize");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses `2`, `i`, `-i`, `2.5i`, `1+i`, `0.3-2e-1i`.
pub fn parse_complex(src: &str) -> Result<Complex64, String> {
    let s: String = src.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || format!("cannot parse complex number '{src}'");
    if s.is_empty() {
        return Err(bad());
    }
    let Some(body) = s.strip_suffix('i') else {
        return s.parse::<f64>().map(|x| Complex64::new(x, 0.0)).map_err(|_| bad());
    };
    // Split at the last sign that is not the exponent sign or the leading sign.
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    let (re, im) = match split {
        Some(k) => (&body[..k], &body[k..]),
        None => ("", body),
    };
    let re = if re.is_empty() { 0.0 } else { re.parse::<f64>().map_err(|_| bad())? };
    let im = match im {
        "" | "+" => 1.0,
        "-" => -1.0,
        x => x.parse::<f64>().map_err(|_| bad())?,
    };
    Ok(Complex64::new(re, im))
}

/// A complex number written as a string, a real number, or `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cx(pub Complex64);

impl<'de> Deserialize<'de> for Cx {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Real(f64),
            Pair([f64; 2]),
        }
        Ok(Cx(match Raw::deserialize(d)? {
            Raw::Text(s) => parse_complex(&s).map_err(D::Error::custom)?,
            Raw::Real(x) => Complex64::new(x, 0.0),
            Raw::Pair([re, im]) => Complex64::new(re, im),
        }))
    }
}

/// A full matrix, or a complex scalar standing for that multiple of the identity.
#[derive(Debug, Clone, PartialEq)]
pub enum Point {
    Matrix(ComplexMatrix),
    Scalar(Complex64),
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        if v.is_object() {
            serde_json::from_value(v).map(Point::Matrix).map_err(D::Error::custom)
        } else {
            serde_json::from_value::<Cx>(v).map(|c| Point::Scalar(c.0)).map_err(D::Error::custom)
        }
    }
}

impl Point {
    pub fn to_matrix(&self, dim: usize) -> ComplexMatrix {
        match self {
            Point::Matrix(m) => m.clone(),
            Point::Scalar(z) => ComplexMatrix::scalar(dim, *z),
        }
    }
}

/// One-based resolvent word: `"[(2i,1),(3i,2)]"` or `[["2i", 1], ["3i", 2]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Word(pub Vec<(Complex64, usize)>);

pub fn parse_word(src: &str) -> Result<Word, String> {
    let s: String = src.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| format!("word must be enclosed in [...]: '{src}'"))?;
    if inner.is_empty() {
        return Ok(Word(Vec::new()));
    }
    let inner = inner
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| format!("word letters must look like (z,k): '{src}'"))?;
    inner
        .split("),(")
        .map(|letter| {
            let (z, k) = letter.rsplit_once(',').ok_or_else(|| format!("bad letter '({letter})'"))?;
            let k: usize = k.parse().map_err(|_| format!("bad variable index in '({letter})'"))?;
            if k == 0 {
                return Err("variable indices are one-based".to_string());
            }
            Ok((parse_complex(z)?, k))
        })
        .collect::<Result<_, _>>()
        .map(Word)
}

impl<'de> Deserialize<'de> for Word {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Letters(Vec<(Cx, usize)>),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => parse_word(&s).map_err(D::Error::custom),
            Raw::Letters(v) => {
                if v.iter().any(|(_, k)| *k == 0) {
                    return Err(D::Error::custom("variable indices are one-based"));
                }
                Ok(Word(v.into_iter().map(|(z, k)| (z.0, k)).collect()))
            }
        }
    }
}

/// Comma-separated complex targets (`"i,1+i,0.3+2i"`) or a JSON list.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets(pub Vec<Complex64>);

pub fn parse_targets(src: &str) -> Result<Targets, String> {
    src.split(',').filter(|t| !t.trim().is_empty()).map(parse_complex).collect::<Result<_, _>>().map(Targets)
}

impl<'de> Deserialize<'de> for Targets {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(Vec<Cx>),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => parse_targets(&s).map_err(D::Error::custom),
            Raw::List(v) => Ok(Targets(v.into_iter().map(|c| c.0).collect())),
        }
    }
}

/// A law given as a JSON object or by a short name with default parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Law(pub ScalarMeasure);

pub fn law_by_name(name: &str) -> Result<ScalarMeasure, String> {
    Ok(match name {
        "cauchy" => ScalarMeasure::standard_cauchy(),
        "semicircle" => ScalarMeasure::semicircle(1.0),
        "bernoulli" => ScalarMeasure::bernoulli(1.0, 0.0),
        "arcsine" => ScalarMeasure::arcsine(2.0),
        "point_mass" => ScalarMeasure::point_mass(0.0),
        other => return Err(format!("unknown law name '{other}'")),
    })
}

impl<'de> Deserialize<'de> for Law {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let law = match v {
            serde_json::Value::String(s) => law_by_name(&s).map_err(D::Error::custom)?,
            other => serde_json::from_value::<ScalarMeasure>(other).map_err(D::Error::custom)?,
        };
        law.validate().map_err(D::Error::custom)?;
        Ok(Law(law))
    }
}

fn one() -> usize {
    1
}

fn default_delta() -> f64 {
    1e-3
}

fn default_samples() -> usize {
    10_000
}

fn default_probe() -> f64 {
    100.0
}

fn default_fbcs_word() -> Word {
    parse_word("[(2i,1),(3i,2)]").expect("literal word parses")
}

fn default_mode() -> IndependenceMode {
    IndependenceMode::Free
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GEvalParams {
    pub dist: OVDistribution,
    pub points: Vec<Point>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallParams {
    pub dist: OVDistribution,
    pub lambda: f64,
    #[serde(default = "one")]
    pub n: usize,
    /// Defaults to `λ/2`.
    #[serde(rename = "R", default)]
    pub big_r: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct REvalParams {
    #[serde(flatten)]
    pub ball: BallParams,
    /// Lower-half-plane `base_dim` values laid out alternately, or full matrices.
    pub targets: Vec<Point>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvolveParams {
    pub x: OVDistribution,
    pub y: OVDistribution,
    /// Exact model of `X + Y` to compare against.
    #[serde(default)]
    pub sum: Option<OVDistribution>,
    /// Matrix model of `X + Y` to compare against.
    #[serde(default)]
    pub mc: Option<MatrixModelSpec>,
    /// Upper-half-plane points of size `base_dim`.
    pub points: Vec<Point>,
    /// Base point parameter; chosen per point when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncateParams {
    pub law: Law,
    pub b: Point,
    /// Explicit cutoffs, or `1..=k_max`.
    #[serde(default)]
    pub cutoffs: Option<Vec<f64>>,
    #[serde(default)]
    pub k_max: Option<u32>,
    #[serde(rename = "C")]
    pub c_bound: f64,
    pub r: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsParams {
    pub word: Word,
    #[serde(default = "default_mode")]
    pub mode: IndependenceMode,
    /// One law for every variable, or one per variable.
    #[serde(default)]
    pub law: Option<Law>,
    #[serde(default)]
    pub laws: Option<Vec<Law>>,
    #[serde(default)]
    pub mc: Option<McOptions>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbcsParams {
    #[serde(default = "default_fbcs_word")]
    pub word: Word,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeumannParams {
    pub b: ComplexMatrix,
    pub laws: Vec<Law>,
    #[serde(default = "default_mode")]
    pub mode: IndependenceMode,
    /// Chosen from the tail bound when absent.
    #[serde(default)]
    pub p_max: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KillerParams {
    pub targets: Targets,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBlocks {
    pub count: usize,
    pub dim: usize,
    /// Every sample is scaled so that `‖B^{-1}‖` equals this value.
    pub inv_norm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockIdentityParams {
    pub law: Law,
    #[serde(default)]
    pub b: Vec<ComplexMatrix>,
    #[serde(default)]
    pub random: Option<RandomBlocks>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Truncations { law: Law, ks: Vec<f64> },
    EscapingMass { ks: Vec<f64> },
    Explicit { members: Vec<OVDistribution> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSet {
    pub points: Vec<Point>,
}

/// Seeded points of size `dim` with `‖b‖ < C` and half-plane margin above `r`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSet {
    pub dim: usize,
    pub count: usize,
    #[serde(rename = "C")]
    pub c_bound: f64,
    pub r: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum TestSetSpec {
    Points(ExplicitSet),
    Random(RandomSet),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceParams {
    pub family: FamilySpec,
    #[serde(default)]
    pub limit: Option<OVDistribution>,
    pub test_set: TestSetSpec,
    #[serde(default)]
    pub envelope: Option<Vec<f64>>,
    #[serde(default = "default_probe")]
    pub probe_height: f64,
}
