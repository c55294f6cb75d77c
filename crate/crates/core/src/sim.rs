//! In-process experiments: many seeded retrievals against one system, exact
//! enumeration of the query space, and parameter sweeps.

use std::io::Write;

use num_bigint::BigInt;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::analysis::{self, PriorFileLengths, Rational};
use crate::rng::{self, FILES_STREAM};
use crate::scheme::{
    encode_system, gen_master_query, retrieve_with_query, ParamsHeader, QueryMatrix, SchemeError,
    SourceFile, SystemParams,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("need at least one trial")]
    NoTrials,
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error("trial {trial} (seed {seed}, theta {theta}) failed: {reason}")]
    TrialFailed {
        seed: u64,
        trial: u64,
        theta: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaPolicy {
    Fixed(usize),
    Uniform,
}

/// Aggregate of a batch of retrievals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialStats {
    pub params: ParamsHeader,
    pub trials: u64,
    pub file_len: usize,
    /// Field elements downloaded over all trials.
    pub total_download: u64,
    /// Field elements downloaded from each server over all trials.
    pub per_server_load: Vec<u64>,
    /// `(trials, download)` for each requested file index.
    pub per_theta: Vec<(u64, u64)>,
    #[serde(serialize_with = "ser_rational")]
    pub exact_expected_download: Rational,
    #[serde(serialize_with = "ser_rational")]
    pub exact_rate: Rational,
}

impl TrialStats {
    pub fn mean_download(&self) -> f64 {
        self.total_download as f64 / self.trials as f64
    }

    /// `L * trials / total_download`, exactly.
    pub fn empirical_rate(&self) -> Rational {
        Rational::new(
            BigInt::from(self.file_len as u64 * self.trials),
            BigInt::from(self.total_download),
        )
    }

    /// Chi-square p-value of the per-server totals against an even split.
    pub fn load_uniformity_p_value(&self) -> f64 {
        let servers = self.per_server_load.len();
        let expected = self.total_download as f64 / servers as f64;
        if servers < 2 || expected == 0.0 {
            return 1.0;
        }
        let chi2: f64 = self
            .per_server_load
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        ChiSquared::new((servers - 1) as f64).expect("positive degrees of freedom").sf(chi2)
    }
}

/// Files shared by every trial of a run, drawn from the seed's file stream.
pub fn random_sources(params: &SystemParams, seed: u64) -> Vec<SourceFile> {
    let mut rng = rng::stream(seed, FILES_STREAM);
    (0..params.m_files()).map(|_| SourceFile::random(params, &mut rng)).collect()
}

/// Runs `n_trials` independent retrievals, each checked against its source.
///
/// Trial `i` draws its file index and query from stream `i` of `seed`, so the
/// result is the same however rayon schedules the work.
pub fn run_trials(params: &SystemParams, n_trials: u64, seed: u64, policy: ThetaPolicy) -> Result<TrialStats, SimError> {
    if n_trials == 0 {
        return Err(SimError::NoTrials);
    }
    if let ThetaPolicy::Fixed(theta) = policy {
        if theta >= params.m_files() {
            return Err(SchemeError::Index {
                what: "file",
                index: theta,
                bound: params.m_files(),
            }
            .into());
        }
    }
    let sources = random_sources(params, seed);
    let (_, storages) = encode_system(params, &sources)?;
    let code = params.code();
    let (n, m) = (params.n_servers(), params.m_files());

    let zero = || (vec![0u64; n], vec![(0u64, 0u64); m]);
    let (per_server_load, per_theta) = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng::stream(seed, trial);
            let theta = match policy {
                ThetaPolicy::Fixed(theta) => theta,
                ThetaPolicy::Uniform => rng.random_range(0..m),
            };
            let fail = |reason: String| SimError::TrialFailed {
                seed,
                trial,
                theta,
                reason,
            };
            let master = gen_master_query(params, &mut rng);
            let out = retrieve_with_query(&master, theta, &storages, params, &code).map_err(|e| fail(e.to_string()))?;
            if out.file != sources[theta] {
                return Err(fail(format!("decoded file differs from source for query [{master}]")));
            }
            Ok((theta, out.per_server))
        })
        .try_fold(zero, |(mut load, mut thetas), res: Result<_, SimError>| {
            let (theta, per_server) = res?;
            let d: usize = per_server.iter().sum();
            for (acc, l) in load.iter_mut().zip(per_server) {
                *acc += l as u64;
            }
            thetas[theta].0 += 1;
            thetas[theta].1 += d as u64;
            Ok::<_, SimError>((load, thetas))
        })
        .try_reduce(zero, |(mut a, mut at), (b, bt)| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            for (x, y) in at.iter_mut().zip(bt) {
                x.0 += y.0;
                x.1 += y.1;
            }
            Ok((a, at))
        })?;

    Ok(TrialStats {
        params: params.header(),
        trials: n_trials,
        file_len: params.file_len(),
        total_download: per_server_load.iter().sum(),
        per_server_load,
        per_theta,
        exact_expected_download: analysis::expected_download(params),
        exact_rate: analysis::scheme_rate(params),
    })
}

/// Mean download over every master query and every requested file, computed
/// by running each retrieval against real storage and checking the decode.
pub fn exact_expectation_by_enumeration(params: &SystemParams, budget: u128) -> Result<Rational, SimError> {
    let size = match params.query_space_size() {
        Some(size) if size <= budget => size,
        other => {
            return Err(analysis::AnalysisError::BudgetExceeded {
                size: other.map_or_else(|| "> 2^128".into(), |s| s.to_string()),
                budget,
            }
            .into())
        }
    };
    let sources = random_sources(params, 0);
    let (_, storages) = encode_system(params, &sources)?;
    let code = params.code();
    let total: u64 = (0..size)
        .into_par_iter()
        .map(|idx| {
            let q = QueryMatrix::from_space_index(params, idx);
            let mut sum = 0u64;
            for theta in 0..params.m_files() {
                let out = retrieve_with_query(&q, theta, &storages, params, &code)?;
                if out.file != sources[theta] {
                    return Err(SchemeError::Invariant(format!("query [{q}] decoded file {theta} wrongly")));
                }
                sum += out.download() as u64;
            }
            Ok(sum)
        })
        .sum::<Result<u64, SchemeError>>()?;
    Ok(Rational::new(
        BigInt::from(total),
        BigInt::from(size * params.m_files() as u128),
    ))
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub p: u64,
    #[serde(rename = "L")]
    pub l: usize,
    pub trials: u64,
    /// Empirical mean download; absent for formula-only rows.
    pub mean_download: Option<String>,
    pub exact_download: String,
    pub empirical_rate: Option<String>,
    pub capacity: String,
    pub bound: usize,
    pub tight: bool,
    pub gap: String,
    pub prior_file_lengths: PriorFileLengths,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepFailure {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

pub const SWEEP_CSV_HEADER: [&str; 12] = [
    "N",
    "K",
    "M",
    "p",
    "L",
    "trials",
    "mean_download",
    "exact_download",
    "empirical_rate",
    "capacity",
    "bound",
    "tight",
];

impl SweepTable {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.k.to_string(),
                r.m.to_string(),
                r.p.to_string(),
                r.l.to_string(),
                r.trials.to_string(),
                r.mean_download.clone().unwrap_or_default(),
                r.exact_download.clone(),
                r.empirical_rate.clone().unwrap_or_default(),
                r.capacity.clone(),
                r.bound.to_string(),
                r.tight.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sweep_point(point: (usize, usize, usize), prime: u64, trials: u64, seed: u64) -> Result<SweepRow, SimError> {
    let (n, k, m) = point;
    let params = SystemParams::derive(n, k, m, prime)?;
    let formulas = analysis::formula_row(&params);
    let (mean, rate) = if trials > 0 {
        let stats = run_trials(&params, trials, seed, ThetaPolicy::Uniform)?;
        (
            Some(format!("{:.6}", stats.mean_download())),
            Some(format!("{:.6}", analysis::to_f64(&stats.empirical_rate()))),
        )
    } else {
        (None, None)
    };
    Ok(SweepRow {
        n,
        k,
        m,
        p: prime,
        l: params.file_len(),
        trials,
        mean_download: mean,
        exact_download: formulas.d_expected.to_string(),
        empirical_rate: rate,
        capacity: formulas.capacity.to_string(),
        bound: formulas.bound,
        tight: formulas.tight,
        gap: formulas.gap.to_string(),
        prior_file_lengths: analysis::prior_file_lengths(&params),
    })
}

/// Runs every grid point; failing points are recorded and skipped.
pub fn sweep(grid: &[(usize, usize, usize)], prime: u64, trials: u64, seed: u64) -> SweepTable {
    let mut table = SweepTable::default();
    for &point in grid {
        match sweep_point(point, prime, trials, seed) {
            Ok(row) => table.rows.push(row),
            Err(e) => {
                log::warn!("sweep point {point:?} skipped: {e}");
                table.failures.push(SweepFailure {
                    n: point.0,
                    k: point.1,
                    m: point.2,
                    error: e.to_string(),
                });
            }
        }
    }
    table
}

fn ser_rational<S: serde::Serializer>(v: &Rational, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}
