//! Exact performance formulas, file-length bounds, and runtime checks of the
//! structural properties a capacity-achieving linear scheme must have.

use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::gf::FieldElement;
use crate::linalg::Matrix;
use crate::rng;
use crate::scheme::{
    build_server_query, gen_master_query, is_null_round, ParamsHeader, QueryMatrix, SchemeError,
    SystemParams,
};

/// Exact rational, reduced with a positive denominator.
pub type Rational = BigRational;

/// Default bound on `|query space|` for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

/// Family-wise significance level of the statistical privacy test.
pub const PRIVACY_SIGNIFICANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("invalid counts: {0}")]
    Counts(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("query space of size {size} exceeds the enumeration budget {budget}")]
    BudgetExceeded { size: String, budget: u128 },
}

pub fn ratio(num: u64, den: u64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

/// Coded PIR capacity `(1 + K/N + ... + (K/N)^(M-1))^-1`.
pub fn capacity(n_servers: usize, k_mds: usize, m_files: usize) -> Result<Rational, AnalysisError> {
    if k_mds == 0 || n_servers < k_mds || m_files == 0 {
        return Err(AnalysisError::Counts(format!(
            "need N >= K >= 1 and M >= 1, got N={n_servers}, K={k_mds}, M={m_files}"
        )));
    }
    let q = ratio(k_mds as u64, n_servers as u64);
    let mut term = Rational::one();
    let mut sum = Rational::zero();
    for _ in 0..m_files {
        sum += &term;
        term *= &q;
    }
    Ok(sum.recip())
}

/// Expected download `N k (1 - (k/n)^M)` of the scheme.
pub fn expected_download(params: &SystemParams) -> Rational {
    let q = ratio(params.k_reduced() as u64, params.n_reduced() as u64);
    let silent = num_traits::pow(q, params.m_files());
    Rational::from_integer(BigInt::from(params.n_servers() * params.k_reduced())) * (Rational::one() - silent)
}

/// Expected answer length of a single server, `k (1 - (k/n)^M)`.
pub fn expected_server_load(params: &SystemParams) -> Rational {
    expected_download(params) / Rational::from_integer(BigInt::from(params.n_servers()))
}

/// `L / D` for the scheme.
pub fn scheme_rate(params: &SystemParams) -> Rational {
    Rational::from_integer(BigInt::from(params.file_len())) / expected_download(params)
}

/// Lower bound on the file length of any capacity-achieving linear scheme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileLengthBound {
    pub bound: usize,
    /// The bound equals the scheme's file length (`M` above the threshold).
    pub tight: bool,
    /// `floor(K/gcd - K/(N-K)) + 1`; the bound is tight for `M` above it.
    pub threshold: usize,
    pub scheme_len: usize,
    #[serde(serialize_with = "ser_rational")]
    pub gap_factor: Rational,
}

pub fn min_file_length_bound(n_servers: usize, k_mds: usize, m_files: usize) -> Result<FileLengthBound, AnalysisError> {
    if k_mds == 0 || n_servers <= k_mds || m_files <= 1 {
        return Err(AnalysisError::Counts(format!(
            "need N > K >= 1 and M > 1, got N={n_servers}, K={k_mds}, M={m_files}"
        )));
    }
    let d = n_servers.gcd(&k_mds);
    let redundancy = n_servers - k_mds;
    // K/d - K/(N-K) = (K(N-K)/d - K) / (N-K); the numerator is k*d*(n-k-1) >= 0.
    let threshold = (k_mds * redundancy / d - k_mds) / redundancy + 1;
    let scheme_len = k_mds * redundancy / d;
    let tight = m_files > threshold;
    let bound = if tight { scheme_len } else { redundancy };
    Ok(FileLengthBound {
        bound,
        tight,
        threshold,
        scheme_len,
        gap_factor: ratio(scheme_len as u64, bound as u64),
    })
}

/// File lengths of earlier capacity-achieving coded schemes, `K N^M` and
/// `K (N/gcd)^(M-1)`, next to this scheme's `K (N-K) / gcd`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PriorFileLengths {
    #[serde(serialize_with = "ser_display")]
    pub generic_len: BigUint,
    #[serde(serialize_with = "ser_display")]
    pub reduced_len: BigUint,
    pub this_scheme: usize,
}

pub fn prior_file_lengths(params: &SystemParams) -> PriorFileLengths {
    let k = BigUint::from(params.k_mds());
    PriorFileLengths {
        generic_len: &k * BigUint::from(params.n_servers()).pow(params.m_files() as u32),
        reduced_len: &k * BigUint::from(params.n_reduced()).pow(params.m_files() as u32 - 1),
        this_scheme: params.file_len(),
    }
}

/// The 0/1 matrix `A` with `answer = A * y_t`, one row per non-silent round.
/// Columns are grouped in `M` blocks of `lambda`, block `i` addressing file `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerMatrix {
    matrix: Matrix,
    rounds: Vec<usize>,
    m_files: usize,
    lambda: usize,
}

impl AnswerMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Answer length `l_t`.
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    /// The round each row answers.
    pub fn rounds(&self) -> &[usize] {
        &self.rounds
    }

    /// `A * y` for a stored vector `y` of length `M * lambda`.
    pub fn apply(&self, stored: &[FieldElement]) -> Result<Vec<FieldElement>, AnalysisError> {
        self.matrix
            .mul_vec(stored)
            .map_err(|e| SchemeError::Dimension(e.to_string()).into())
    }

    pub fn full_rank(&self) -> usize {
        self.matrix.rank()
    }

    /// Columns of every block except `theta`.
    fn interference_columns(&self, theta: usize) -> Vec<usize> {
        (0..self.m_files)
            .filter(|&i| i != theta)
            .flat_map(|i| i * self.lambda..(i + 1) * self.lambda)
            .collect()
    }
}

pub fn build_answer_matrix(query: &QueryMatrix, params: &SystemParams) -> Result<AnswerMatrix, AnalysisError> {
    let (m, lambda) = (params.m_files(), params.lambda());
    if query.rows() != params.k_reduced() || query.cols() != m || query.alphabet() != params.n_reduced() {
        return Err(SchemeError::MalformedQuery("query shape does not match parameters".into()).into());
    }
    let field = params.field();
    let rounds: Vec<usize> = (0..query.rows())
        .filter(|&s| !is_null_round(query.row(s), params))
        .collect();
    let mut matrix = Matrix::zeros(field, rounds.len(), m * lambda);
    for (r, &s) in rounds.iter().enumerate() {
        for (i, &j) in query.row(s).iter().enumerate() {
            if j < lambda {
                matrix.set(r, i * lambda + j, field.one());
            }
        }
    }
    Ok(AnswerMatrix {
        matrix,
        rounds,
        m_files: m,
        lambda,
    })
}

/// Rank of the answer matrix with the desired file's block removed.
pub fn interference_rank(answer: &AnswerMatrix, theta: usize) -> Result<usize, AnalysisError> {
    if theta >= answer.m_files {
        return Err(SchemeError::Index {
            what: "file",
            index: theta,
            bound: answer.m_files,
        }
        .into());
    }
    if answer.is_empty() {
        return Ok(0);
    }
    Ok(answer.matrix.select_columns(&answer.interference_columns(theta)).rank())
}

/// Outcome of checking `D_rel - L = K r` on one query realization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankIdentityReport {
    pub theta: usize,
    /// Interference rank at each server.
    pub ranks: Vec<usize>,
    /// Full answer-matrix rank at each server.
    pub full_ranks: Vec<usize>,
    /// Common interference rank, if all servers agree.
    pub r: Option<usize>,
    pub d_rel: usize,
    pub file_len: usize,
    pub ranks_equal: bool,
    pub download_identity: bool,
}

impl RankIdentityReport {
    pub fn pass(&self) -> bool {
        self.ranks_equal && self.download_identity
    }
}

pub fn verify_rank_identity(
    master: &QueryMatrix,
    theta: usize,
    params: &SystemParams,
) -> Result<RankIdentityReport, AnalysisError> {
    let mut ranks = Vec::with_capacity(params.n_servers());
    let mut full_ranks = Vec::with_capacity(params.n_servers());
    let mut d_rel = 0;
    for t in 0..params.n_servers() {
        let q = build_server_query(master, theta, t, params)?;
        let a = build_answer_matrix(&q, params)?;
        d_rel += a.len();
        ranks.push(interference_rank(&a, theta)?);
        full_ranks.push(a.full_rank());
    }
    let ranks_equal = ranks.windows(2).all(|w| w[0] == w[1]);
    let r = ranks_equal.then(|| ranks[0]);
    let download_identity = r.is_some_and(|r| d_rel == params.file_len() + params.k_mds() * r);
    Ok(RankIdentityReport {
        theta,
        ranks,
        full_ranks,
        r,
        d_rel,
        file_len: params.file_len(),
        ranks_equal,
        download_identity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrivacyMode {
    Exhaustive { budget: u128 },
    Statistical { samples: usize, seed: u64 },
}

/// One `(theta, t)` pair of the exhaustive check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BijectionCheck {
    pub theta: usize,
    pub server: usize,
    pub bijective: bool,
}

/// One `(theta, t, s, i)` entry marginal of the statistical check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformityCheck {
    pub theta: usize,
    pub server: usize,
    pub row: usize,
    pub col: usize,
    pub chi2: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrivacyReport {
    Exhaustive {
        space_size: u128,
        checks: Vec<BijectionCheck>,
    },
    Statistical {
        samples: usize,
        /// Per-test threshold: the family-wise level split evenly (Bonferroni).
        per_test_alpha: f64,
        min_p_value: f64,
        checks: Vec<UniformityCheck>,
    },
}

impl PrivacyReport {
    pub fn pass(&self) -> bool {
        match self {
            PrivacyReport::Exhaustive { checks, .. } => checks.iter().all(|c| c.bijective),
            PrivacyReport::Statistical {
                per_test_alpha,
                checks,
                ..
            } => checks.iter().all(|c| c.p_value >= *per_test_alpha),
        }
    }
}

/// Checks that every server's query is uniform over the query space whatever
/// file is requested.
///
/// Exhaustive mode proves it: for each `(theta, t)` the map from master query
/// to server query is a bijection of the query space. Statistical mode runs a
/// chi-square test on every entry marginal of sampled server queries.
pub fn verify_privacy(params: &SystemParams, mode: PrivacyMode) -> Result<PrivacyReport, AnalysisError> {
    match mode {
        PrivacyMode::Exhaustive { budget } => exhaustive_privacy(params, budget),
        PrivacyMode::Statistical { samples, seed } => Ok(statistical_privacy(params, samples, seed)),
    }
}

fn enumerable_size(params: &SystemParams, budget: u128) -> Result<u128, AnalysisError> {
    match params.query_space_size() {
        Some(size) if size <= budget => Ok(size),
        Some(size) => Err(AnalysisError::BudgetExceeded {
            size: size.to_string(),
            budget,
        }),
        None => Err(AnalysisError::BudgetExceeded {
            size: "> 2^128".into(),
            budget,
        }),
    }
}

fn exhaustive_privacy(params: &SystemParams, budget: u128) -> Result<PrivacyReport, AnalysisError> {
    let size = enumerable_size(params, budget)?;
    let pairs: Vec<(usize, usize)> = (0..params.m_files())
        .flat_map(|theta| (0..params.n_servers()).map(move |t| (theta, t)))
        .collect();
    let checks = pairs
        .into_par_iter()
        .map(|(theta, server)| {
            let mut hit = vec![false; size as usize];
            let mut bijective = true;
            for idx in 0..size {
                let q = QueryMatrix::from_space_index(params, idx);
                let image = build_server_query(&q, theta, server, params)?.space_index() as usize;
                if std::mem::replace(&mut hit[image], true) {
                    bijective = false;
                    break;
                }
            }
            Ok(BijectionCheck {
                theta,
                server,
                bijective,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    Ok(PrivacyReport::Exhaustive {
        space_size: size,
        checks,
    })
}

fn statistical_privacy(params: &SystemParams, samples: usize, seed: u64) -> PrivacyReport {
    let (n, k, m) = (params.n_reduced(), params.k_reduced(), params.m_files());
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|theta| (0..params.n_servers()).map(move |t| (theta, t)))
        .collect();
    let tests = pairs.len() * k * m;
    let per_test_alpha = PRIVACY_SIGNIFICANCE / tests as f64;
    let dist = ChiSquared::new((n - 1) as f64).expect("positive degrees of freedom");
    let expected = samples as f64 / n as f64;

    let checks: Vec<UniformityCheck> = pairs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(pair_idx, &(theta, server))| {
            let mut rng = rng::stream(seed, pair_idx as u64);
            // counts[(s * m + i) * n + value]
            let mut counts = vec![0u64; k * m * n];
            for _ in 0..samples {
                let master = gen_master_query(params, &mut rng);
                let q = build_server_query(&master, theta, server, params).expect("valid indices");
                for (cell, &v) in q.entries().iter().enumerate() {
                    counts[cell * n + v] += 1;
                }
            }
            (0..k * m)
                .map(|cell| {
                    let chi2: f64 = counts[cell * n..(cell + 1) * n]
                        .iter()
                        .map(|&c| (c as f64 - expected).powi(2) / expected)
                        .sum();
                    UniformityCheck {
                        theta,
                        server,
                        row: cell / m,
                        col: cell % m,
                        chi2,
                        p_value: dist.sf(chi2),
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let min_p_value = checks.iter().map(|c| c.p_value).fold(1.0, f64::min);
    PrivacyReport::Statistical {
        samples,
        per_test_alpha,
        min_p_value,
        checks,
    }
}

/// Mean download over every master query, for a fixed requested file.
pub fn enumerate_mean_download(params: &SystemParams, theta: usize, budget: u128) -> Result<Rational, AnalysisError> {
    let size = enumerable_size(params, budget)?;
    let total: u64 = (0..size)
        .into_par_iter()
        .map(|idx| {
            let q = QueryMatrix::from_space_index(params, idx);
            crate::scheme::realized_download(&q, theta, params).map(|d| d as u64)
        })
        .sum::<Result<u64, SchemeError>>()?;
    Ok(Rational::new(BigInt::from(total), BigInt::from(size)))
}

/// Closed-form summary of one parameter point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FormulaRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "D_expected", serialize_with = "ser_rational")]
    pub d_expected: Rational,
    #[serde(rename = "R", serialize_with = "ser_rational")]
    pub rate: Rational,
    #[serde(rename = "C", serialize_with = "ser_rational")]
    pub capacity: Rational,
    pub bound: usize,
    pub tight: bool,
    #[serde(serialize_with = "ser_rational")]
    pub gap: Rational,
}

pub fn formula_row(params: &SystemParams) -> FormulaRow {
    let bound = min_file_length_bound(params.n_servers(), params.k_mds(), params.m_files())
        .expect("validated parameters are non-trivial");
    FormulaRow {
        n: params.n_servers(),
        k: params.k_mds(),
        m: params.m_files(),
        l: params.file_len(),
        d_expected: expected_download(params),
        rate: scheme_rate(params),
        capacity: capacity(params.n_servers(), params.k_mds(), params.m_files()).expect("valid counts"),
        bound: bound.bound,
        tight: bound.tight,
        gap: bound.gap_factor,
    }
}

/// Writes formula rows as CSV with header `N,K,M,L,D_expected,R,C,bound,tight,gap`.
pub fn write_formula_csv<W: std::io::Write>(rows: &[FormulaRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform JSON envelope for check results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub check: String,
    pub params: ParamsHeader,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<usize>,
    pub pass: bool,
    pub details: serde_json::Value,
}

impl Report {
    pub fn new(check: &str, params: &SystemParams, theta: Option<usize>, pass: bool, details: serde_json::Value) -> Self {
        Self {
            check: check.into(),
            params: params.header(),
            theta,
            pass,
            details,
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        write!(f, "{} (N={}, K={}, M={}, p={})", self.check, p.n, p.k, p.m, p.p)?;
        if let Some(theta) = self.theta {
            write!(f, " theta={theta}")?;
        }
        write!(f, ": {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// `R = L / D` against the capacity, compared exactly.
pub fn capacity_report(params: &SystemParams) -> Report {
    let rate = scheme_rate(params);
    let cap = capacity(params.n_servers(), params.k_mds(), params.m_files()).expect("valid counts");
    let pass = rate == cap;
    Report::new(
        "capacity",
        params,
        None,
        pass,
        json!({
            "L": params.file_len(),
            "D_expected": expected_download(params).to_string(),
            "R": rate.to_string(),
            "C": cap.to_string(),
        }),
    )
}

/// Scheme file length against the lower bound.
pub fn bound_report(params: &SystemParams) -> Report {
    let b = min_file_length_bound(params.n_servers(), params.k_mds(), params.m_files()).expect("validated parameters");
    let k_over_d = ratio(params.k_reduced() as u64, 1);
    let pass = if b.tight {
        b.scheme_len == b.bound
    } else {
        b.gap_factor == k_over_d
    };
    Report::new(
        "bound",
        params,
        None,
        pass,
        json!({
            "L": params.file_len(),
            "bound": b.bound,
            "tight": b.tight,
            "threshold": b.threshold,
            "gap": b.gap_factor.to_string(),
            "prior": prior_file_lengths(params),
        }),
    )
}

pub fn privacy_report(params: &SystemParams, report: &PrivacyReport) -> Report {
    let details = match report {
        PrivacyReport::Exhaustive { space_size, checks } => json!({
            "mode": "exhaustive",
            "space_size": space_size.to_string(),
            "pairs": checks.len(),
            "failures": checks.iter().filter(|c| !c.bijective).collect::<Vec<_>>(),
        }),
        PrivacyReport::Statistical {
            samples,
            per_test_alpha,
            min_p_value,
            checks,
        } => json!({
            "mode": "statistical",
            "samples": samples,
            "tests": checks.len(),
            "family_alpha": PRIVACY_SIGNIFICANCE,
            "per_test_alpha": per_test_alpha,
            "min_p_value": min_p_value,
        }),
    };
    Report::new("privacy", params, None, report.pass(), details)
}

pub fn rank_report(params: &SystemParams, report: &RankIdentityReport) -> Report {
    Report::new(
        "rank",
        params,
        Some(report.theta),
        report.pass(),
        serde_json::to_value(report).expect("serializable"),
    )
}

fn ser_rational<S: serde::Serializer>(v: &Rational, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn ser_display<S: serde::Serializer, T: fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Approximate decimal value, for display next to the exact fraction.
pub fn to_f64(v: &Rational) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
