//! The coded PIR protocol: parameters, storage layout, queries, server
//! answers and the user's reconstruction.
//!
//! Each file is `lambda = n - k` Reed–Solomon codewords of length `N`, where
//! `n = N / gcd(N, K)` and `k = K / gcd(N, K)`. Server `t` stores column `t`
//! of every encoded file. Row indices in `[lambda, n)` name virtual dummy
//! zeros and are never stored.
//!
//! To fetch file `theta` the user draws a `k x M` matrix whose columns are
//! uniform partial permutations of `[0, n)` and sends server `t` a copy whose
//! column `theta` is cyclically shifted by `t` modulo `n`. For every row of its
//! query a server returns the sum of the addressed symbols, or nothing if all
//! of them are dummy zeros.

use std::fmt;

use num_integer::Integer;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf::{FieldElement, FieldError, PrimeField};
use crate::rs::{CodeError, Codeword, MdsCode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemeError {
    #[error("trivial regime: {0}")]
    TrivialRegime(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{what} index {index} out of range [0, {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("decoder invariant violated: {0}")]
    Invariant(String),
    #[error("corrupt answers in round {round}: {source}")]
    CorruptAnswer { round: usize, source: CodeError },
}

/// Validated `(N, K, M, p)` together with the derived scheme dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SystemParams {
    n_servers: usize,
    k_mds: usize,
    m_files: usize,
    field: PrimeField,
    n_reduced: usize,
    k_reduced: usize,
    d: usize,
    lambda: usize,
    file_len: usize,
}

impl SystemParams {
    pub fn derive(n_servers: usize, k_mds: usize, m_files: usize, prime: u64) -> Result<Self, SchemeError> {
        if k_mds == 0 {
            return Err(SchemeError::TrivialRegime("K must be at least 1".into()));
        }
        if n_servers <= k_mds {
            return Err(SchemeError::TrivialRegime(format!(
                "need N > K, got N={n_servers}, K={k_mds}"
            )));
        }
        if m_files <= 1 {
            return Err(SchemeError::TrivialRegime(format!("need M > 1, got M={m_files}")));
        }
        let field = PrimeField::new(prime)?;
        if (n_servers as u64) > prime {
            return Err(SchemeError::Params(format!(
                "p={prime} is smaller than N={n_servers}"
            )));
        }
        let d = n_servers.gcd(&k_mds);
        let n_reduced = n_servers / d;
        let k_reduced = k_mds / d;
        let lambda = n_reduced - k_reduced;
        Ok(Self {
            n_servers,
            k_mds,
            m_files,
            field,
            n_reduced,
            k_reduced,
            d,
            lambda,
            file_len: k_mds * lambda,
        })
    }

    /// `N`, the number of servers.
    pub fn n_servers(&self) -> usize {
        self.n_servers
    }

    /// `K`, the MDS code dimension.
    pub fn k_mds(&self) -> usize {
        self.k_mds
    }

    /// `M`, the number of files.
    pub fn m_files(&self) -> usize {
        self.m_files
    }

    pub fn field(&self) -> PrimeField {
        self.field
    }

    pub fn prime(&self) -> u64 {
        self.field.prime()
    }

    /// `n = N / gcd(N, K)`: the query alphabet size.
    pub fn n_reduced(&self) -> usize {
        self.n_reduced
    }

    /// `k = K / gcd(N, K)`: rows per query, answer rounds per server.
    pub fn k_reduced(&self) -> usize {
        self.k_reduced
    }

    /// `gcd(N, K)`.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Codewords per file, `n - k`.
    pub fn lambda(&self) -> usize {
        self.lambda
    }

    /// Field elements per source file, `K * lambda`.
    pub fn file_len(&self) -> usize {
        self.file_len
    }

    pub fn code(&self) -> MdsCode {
        MdsCode::new(self.n_servers, self.k_mds, self.prime()).expect("validated parameters")
    }

    /// Number of query columns, `|Omega| = n! / (n - k)!`.
    pub fn omega_size(&self) -> u128 {
        (self.lambda + 1..=self.n_reduced).map(|x| x as u128).product()
    }

    /// Number of query matrices `|Omega|^M`, or `None` on overflow.
    pub fn query_space_size(&self) -> Option<u128> {
        self.omega_size().checked_pow(self.m_files as u32)
    }

    pub fn header(&self) -> ParamsHeader {
        ParamsHeader {
            n: self.n_servers,
            k: self.k_mds,
            m: self.m_files,
            p: self.prime(),
        }
    }
}

impl fmt::Display for SystemParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(N={}, K={}, M={}, p={})",
            self.n_servers,
            self.k_mds,
            self.m_files,
            self.prime()
        )
    }
}

pub fn derive_params(n_servers: usize, k_mds: usize, m_files: usize, prime: u64) -> Result<SystemParams, SchemeError> {
    SystemParams::derive(n_servers, k_mds, m_files, prime)
}

/// The `(N, K, M, p)` tuple as it appears in files and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub p: u64,
}

impl ParamsHeader {
    pub fn validate(&self) -> Result<SystemParams, SchemeError> {
        SystemParams::derive(self.n, self.k, self.m, self.p)
    }
}

/// `lambda x K` message symbols of one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    rows: Vec<Vec<FieldElement>>,
}

impl SourceFile {
    pub fn new(params: &SystemParams, rows: Vec<Vec<FieldElement>>) -> Result<Self, SchemeError> {
        if rows.len() != params.lambda() || rows.iter().any(|r| r.len() != params.k_mds()) {
            return Err(SchemeError::Dimension(format!(
                "source file must be {}x{}",
                params.lambda(),
                params.k_mds()
            )));
        }
        if let Some(e) = rows.iter().flatten().find(|e| e.prime() != params.prime()) {
            return Err(FieldError::Mismatch {
                left: params.prime(),
                right: e.prime(),
            }
            .into());
        }
        Ok(Self { rows })
    }

    pub fn zeros(params: &SystemParams) -> Self {
        Self {
            rows: vec![vec![params.field().zero(); params.k_mds()]; params.lambda()],
        }
    }

    pub fn random<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> Self {
        let field = params.field();
        let rows = (0..params.lambda())
            .map(|_| {
                (0..params.k_mds())
                    .map(|_| field.elem(rng.random_range(0..field.prime())))
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<FieldElement>] {
        &self.rows
    }

    /// Symbols in row-major order.
    pub fn symbols(&self) -> impl Iterator<Item = FieldElement> + '_ {
        self.rows.iter().flatten().copied()
    }
}

/// `lambda` codewords of length `N`; row `j` encodes row `j` of the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFile {
    rows: Vec<Codeword>,
}

impl EncodedFile {
    pub fn rows(&self) -> &[Codeword] {
        &self.rows
    }

    /// `W(j, t)`.
    pub fn symbol(&self, row: usize, server: usize) -> FieldElement {
        self.rows[row].symbols()[server]
    }
}

/// What server `t` holds: column `t` of every encoded file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerStorage {
    server_index: usize,
    fragments: Vec<Vec<FieldElement>>,
}

impl ServerStorage {
    pub fn new(params: &SystemParams, server_index: usize, fragments: Vec<Vec<FieldElement>>) -> Result<Self, SchemeError> {
        if server_index >= params.n_servers() {
            return Err(SchemeError::Index {
                what: "server",
                index: server_index,
                bound: params.n_servers(),
            });
        }
        if fragments.len() != params.m_files() || fragments.iter().any(|f| f.len() != params.lambda()) {
            return Err(SchemeError::Dimension(format!(
                "storage must hold {} fragments of {} symbols",
                params.m_files(),
                params.lambda()
            )));
        }
        if let Some(e) = fragments.iter().flatten().find(|e| e.prime() != params.prime()) {
            return Err(FieldError::Mismatch {
                left: params.prime(),
                right: e.prime(),
            }
            .into());
        }
        Ok(Self {
            server_index,
            fragments,
        })
    }

    pub fn server_index(&self) -> usize {
        self.server_index
    }

    pub fn fragments(&self) -> &[Vec<FieldElement>] {
        &self.fragments
    }

    /// `W_file(row, t)`, reading the virtual dummy zeros for `row >= lambda`.
    #[inline]
    pub fn read(&self, file: usize, row: usize, field: PrimeField) -> FieldElement {
        self.fragments[file].get(row).copied().unwrap_or_else(|| field.zero())
    }

    /// The stored vector `y_t`: fragments concatenated file by file.
    pub fn stacked(&self) -> Vec<FieldElement> {
        self.fragments.iter().flatten().copied().collect()
    }
}

/// A `k x M` matrix over `[0, n)` whose columns have pairwise distinct entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryMatrix {
    rows: usize,
    cols: usize,
    alphabet: usize,
    entries: Vec<usize>,
}

impl QueryMatrix {
    /// Builds a query from row-major entries, checking membership in the query
    /// space over alphabet `[0, alphabet)`.
    pub fn new(rows: usize, cols: usize, alphabet: usize, entries: Vec<usize>) -> Result<Self, SchemeError> {
        if entries.len() != rows * cols {
            return Err(SchemeError::MalformedQuery(format!(
                "expected {} entries for a {rows}x{cols} query, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if let Some(&e) = entries.iter().find(|&&e| e >= alphabet) {
            return Err(SchemeError::MalformedQuery(format!("entry {e} not in [0, {alphabet})")));
        }
        for c in 0..cols {
            let mut seen = vec![false; alphabet];
            for r in 0..rows {
                let e = entries[r * cols + c];
                if std::mem::replace(&mut seen[e], true) {
                    return Err(SchemeError::MalformedQuery(format!(
                        "column {c} repeats entry {e}"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            alphabet,
            entries,
        })
    }

    /// Builds a query from its column vectors.
    pub fn from_columns(alphabet: usize, columns: &[Vec<usize>]) -> Result<Self, SchemeError> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(SchemeError::MalformedQuery("ragged columns".into()));
        }
        let cols = columns.len();
        let entries = (0..rows)
            .flat_map(|r| columns.iter().map(move |c| c[r]))
            .collect();
        Self::new(rows, cols, alphabet, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.entries[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[usize] {
        &self.entries[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    fn check_shape(&self, params: &SystemParams) -> Result<(), SchemeError> {
        if self.rows != params.k_reduced() || self.cols != params.m_files() || self.alphabet != params.n_reduced() {
            return Err(SchemeError::MalformedQuery(format!(
                "query is {}x{} over [0,{}), expected {}x{} over [0,{})",
                self.rows,
                self.cols,
                self.alphabet,
                params.k_reduced(),
                params.m_files(),
                params.n_reduced()
            )));
        }
        Ok(())
    }

    /// Position of this matrix in a fixed enumeration of the query space:
    /// mixed radix over columns, each column ranked as a partial permutation.
    pub fn space_index(&self) -> u128 {
        let omega = omega_size(self.alphabet, self.rows);
        (0..self.cols).fold(0u128, |acc, c| acc * omega + omega_rank(&self.column(c), self.alphabet))
    }

    /// Inverse of [`QueryMatrix::space_index`].
    pub fn from_space_index(params: &SystemParams, mut index: u128) -> Self {
        let (n, k, m) = (params.n_reduced(), params.k_reduced(), params.m_files());
        let omega = params.omega_size();
        let mut columns = vec![Vec::new(); m];
        for c in (0..m).rev() {
            columns[c] = omega_unrank(index % omega, n, k);
            index /= omega;
        }
        Self::from_columns(n, &columns).expect("unranked columns are partial permutations")
    }
}

impl fmt::Display for QueryMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row: Vec<String> = self.row(r).iter().map(usize::to_string).collect();
            write!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn omega_size(n: usize, k: usize) -> u128 {
    (n - k + 1..=n).map(|x| x as u128).product()
}

/// Lehmer-style rank of a partial permutation of length `k` over `[0, n)`.
fn omega_rank(column: &[usize], n: usize) -> u128 {
    let mut used = vec![false; n];
    let mut rank = 0u128;
    for (pos, &v) in column.iter().enumerate() {
        let smaller_free = (0..v).filter(|&x| !used[x]).count() as u128;
        rank = rank * (n - pos) as u128 + smaller_free;
        used[v] = true;
    }
    rank
}

fn omega_unrank(mut rank: u128, n: usize, k: usize) -> Vec<usize> {
    let mut digits = vec![0usize; k];
    for pos in (0..k).rev() {
        let base = (n - pos) as u128;
        digits[pos] = (rank % base) as usize;
        rank /= base;
    }
    let mut free: Vec<usize> = (0..n).collect();
    digits.into_iter().map(|d| free.remove(d)).collect()
}

/// One server's response: `k` rounds, each silent (`None`) or one symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVector {
    rounds: Vec<Option<FieldElement>>,
}

impl AnswerVector {
    pub fn new(rounds: Vec<Option<FieldElement>>) -> Self {
        Self { rounds }
    }

    pub fn rounds(&self) -> &[Option<FieldElement>] {
        &self.rounds
    }

    /// Number of transmitted field elements, `l_t`.
    pub fn download_len(&self) -> usize {
        self.rounds.iter().filter(|r| r.is_some()).count()
    }
}

/// Draws a `k x M` master query with independent uniform columns.
pub fn gen_master_query<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> QueryMatrix {
    let (n, k, m) = (params.n_reduced(), params.k_reduced(), params.m_files());
    let columns: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            // Partial Fisher–Yates: the first k slots of a uniform shuffle.
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(k);
            pool
        })
        .collect();
    QueryMatrix::from_columns(n, &columns).expect("partial permutations are valid columns")
}

/// The query for server `t`: column `theta` shifted by `t` modulo `n`.
pub fn build_server_query(
    master: &QueryMatrix,
    theta: usize,
    server: usize,
    params: &SystemParams,
) -> Result<QueryMatrix, SchemeError> {
    master.check_shape(params)?;
    check_theta(theta, params)?;
    if server >= params.n_servers() {
        return Err(SchemeError::Index {
            what: "server",
            index: server,
            bound: params.n_servers(),
        });
    }
    let n = params.n_reduced();
    let mut q = master.clone();
    for r in 0..q.rows {
        let e = &mut q.entries[r * q.cols + theta];
        *e = (*e + server) % n;
    }
    Ok(q)
}

fn check_theta(theta: usize, params: &SystemParams) -> Result<(), SchemeError> {
    if theta >= params.m_files() {
        return Err(SchemeError::Index {
            what: "file",
            index: theta,
            bound: params.m_files(),
        });
    }
    Ok(())
}

/// A round is silent when every index in its query row is a dummy-zero row.
#[inline]
pub fn is_null_round(row: &[usize], params: &SystemParams) -> bool {
    row.iter().all(|&j| j >= params.lambda())
}

/// `l_t` for a received query, without touching storage.
pub fn answer_len(query: &QueryMatrix, params: &SystemParams) -> usize {
    (0..query.rows()).filter(|&s| !is_null_round(query.row(s), params)).count()
}

/// Total download `sum_t l_t` of the realization `(master, theta)`.
pub fn realized_download(master: &QueryMatrix, theta: usize, params: &SystemParams) -> Result<usize, SchemeError> {
    (0..params.n_servers())
        .map(|t| build_server_query(master, theta, t, params).map(|q| answer_len(&q, params)))
        .sum()
}

/// Answers a received query from local storage. The server never learns
/// which file is wanted.
pub fn server_answer(storage: &ServerStorage, query: &QueryMatrix, params: &SystemParams) -> Result<AnswerVector, SchemeError> {
    query.check_shape(params)?;
    if storage.fragments.len() != params.m_files() || storage.fragments.iter().any(|f| f.len() != params.lambda()) {
        return Err(SchemeError::Dimension("storage does not match parameters".into()));
    }
    let field = params.field();
    let rounds = (0..query.rows())
        .map(|s| {
            let row = query.row(s);
            if is_null_round(row, params) {
                None
            } else {
                Some(
                    row.iter()
                        .enumerate()
                        .fold(field.zero(), |acc, (i, &j)| acc + storage.read(i, j, field)),
                )
            }
        })
        .collect();
    Ok(AnswerVector { rounds })
}

/// Encodes every source row and splits the result into per-server storage.
pub fn encode_system(
    params: &SystemParams,
    sources: &[SourceFile],
) -> Result<(Vec<EncodedFile>, Vec<ServerStorage>), SchemeError> {
    if sources.len() != params.m_files() {
        return Err(SchemeError::Dimension(format!(
            "expected {} source files, got {}",
            params.m_files(),
            sources.len()
        )));
    }
    let code = params.code();
    let encoded = sources
        .iter()
        .map(|src| {
            if src.rows.len() != params.lambda() {
                return Err(SchemeError::Dimension("source row count".into()));
            }
            let rows = src
                .rows
                .iter()
                .map(|row| code.encode(row))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(EncodedFile { rows })
        })
        .collect::<Result<Vec<_>, SchemeError>>()?;
    let storages = (0..params.n_servers())
        .map(|t| ServerStorage {
            server_index: t,
            fragments: encoded
                .iter()
                .map(|file| file.rows.iter().map(|cw| cw.symbols()[t]).collect())
                .collect(),
        })
        .collect();
    Ok((encoded, storages))
}

/// Reconstructs file `theta` from the answers of all `N` servers.
///
/// Round `s` of server `t` carries `W_theta((q + t) mod n, t)` plus the
/// interference `sum_{i != theta} W_i(Q(s, i), t)`, which is a codeword across
/// servers. The `K` servers whose shifted index hits a dummy row see pure
/// interference; interpolating it cancels the interference everywhere else,
/// and each row of `W_theta` then has exactly `K` exposed symbols.
pub fn decode(
    answers: &[AnswerVector],
    master: &QueryMatrix,
    theta: usize,
    params: &SystemParams,
    code: &MdsCode,
) -> Result<SourceFile, SchemeError> {
    master.check_shape(params)?;
    check_theta(theta, params)?;
    let (big_n, big_k) = (params.n_servers(), params.k_mds());
    let (n, lambda) = (params.n_reduced(), params.lambda());
    if code.n_total() != big_n || code.k_msg() != big_k || code.field() != params.field() {
        return Err(SchemeError::Params("code does not match system parameters".into()));
    }
    if answers.len() != big_n {
        return Err(SchemeError::Dimension(format!(
            "expected {big_n} answers, got {}",
            answers.len()
        )));
    }
    if let Some(a) = answers.iter().find(|a| a.rounds.len() != params.k_reduced()) {
        return Err(SchemeError::Dimension(format!(
            "expected {} rounds per answer, got {}",
            params.k_reduced(),
            a.rounds.len()
        )));
    }
    let field = params.field();
    let value = |t: usize, s: usize| answers[t].rounds[s].unwrap_or_else(|| field.zero());

    // exposed[j] collects (t, W_theta(j, t)).
    let mut exposed: Vec<Vec<(usize, FieldElement)>> = vec![Vec::with_capacity(big_k); lambda];
    for s in 0..params.k_reduced() {
        let base = master.get(s, theta);
        let shifted = |t: usize| (base + t) % n;

        // Step 1: interference is known exactly where W_theta reads a dummy zero.
        let interference_known: Vec<(usize, FieldElement)> = (0..big_n)
            .filter(|&t| shifted(t) >= lambda)
            .map(|t| (t, value(t, s)))
            .collect();
        if interference_known.len() != big_k {
            return Err(SchemeError::Invariant(format!(
                "round {s}: {} servers read dummy rows, expected {big_k}",
                interference_known.len()
            )));
        }
        let interference = code
            .erasure_decode(&interference_known)
            .map_err(|source| SchemeError::CorruptAnswer { round: s, source })?;

        // Step 2: cancel it on the remaining servers.
        for t in (0..big_n).filter(|&t| shifted(t) < lambda) {
            exposed[shifted(t)].push((t, value(t, s) - interference.symbols()[t]));
        }
    }

    // Step 3: each row of W_theta now has K known symbols.
    let rows = exposed
        .iter()
        .enumerate()
        .map(|(j, known)| {
            if known.len() != big_k {
                return Err(SchemeError::Invariant(format!(
                    "row {j}: {} exposed symbols, expected {big_k}",
                    known.len()
                )));
            }
            let cw = code.erasure_decode(known).map_err(|e| match e {
                CodeError::BadPosition { .. } => SchemeError::Invariant(format!("row {j}: {e}")),
                other => SchemeError::Code(other),
            })?;
            Ok(code.message_of(&cw).to_vec())
        })
        .collect::<Result<Vec<_>, SchemeError>>()?;
    Ok(SourceFile { rows })
}

/// Result of one complete retrieval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieval {
    pub file: SourceFile,
    pub query: QueryMatrix,
    /// Field elements downloaded from each server, `l_t`.
    pub per_server: Vec<usize>,
}

impl Retrieval {
    /// `D_rel = sum_t l_t`.
    pub fn download(&self) -> usize {
        self.per_server.iter().sum()
    }
}

/// Runs query, answer and decoding in-process for a given master query.
pub fn retrieve_with_query(
    master: &QueryMatrix,
    theta: usize,
    storages: &[ServerStorage],
    params: &SystemParams,
    code: &MdsCode,
) -> Result<Retrieval, SchemeError> {
    if storages.len() != params.n_servers() {
        return Err(SchemeError::Dimension(format!(
            "expected {} storages, got {}",
            params.n_servers(),
            storages.len()
        )));
    }
    let answers = storages
        .iter()
        .enumerate()
        .map(|(t, storage)| {
            if storage.server_index() != t {
                return Err(SchemeError::Params(format!(
                    "storage at position {t} belongs to server {}",
                    storage.server_index()
                )));
            }
            let q = build_server_query(master, theta, t, params)?;
            server_answer(storage, &q, params)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let file = decode(&answers, master, theta, params, code)?;
    Ok(Retrieval {
        file,
        query: master.clone(),
        per_server: answers.iter().map(AnswerVector::download_len).collect(),
    })
}

/// Full in-process retrieval of file `theta` with a freshly drawn query.
pub fn retrieve<R: Rng + ?Sized>(
    theta: usize,
    storages: &[ServerStorage],
    params: &SystemParams,
    rng: &mut R,
) -> Result<Retrieval, SchemeError> {
    check_theta(theta, params)?;
    let master = gen_master_query(params, rng);
    retrieve_with_query(&master, theta, storages, params, &params.code())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// The master query of the (5,3,3) worked example.
    fn example_query() -> QueryMatrix {
        QueryMatrix::from_columns(5, &[vec![3, 0, 1], vec![4, 1, 0], vec![3, 0, 4]]).unwrap()
    }

    fn example_params() -> SystemParams {
        derive_params(5, 3, 3, 7).unwrap()
    }

    #[test]
    fn derive_params_examples() {
        let p = example_params();
        assert_eq!((p.n_reduced(), p.k_reduced(), p.d(), p.lambda(), p.file_len()), (5, 3, 1, 2, 6));
        let p = derive_params(4, 2, 2, 5).unwrap();
        assert_eq!((p.n_reduced(), p.k_reduced(), p.d(), p.lambda(), p.file_len()), (2, 1, 2, 1, 2));
        assert!(matches!(derive_params(3, 3, 2, 5), Err(SchemeError::TrivialRegime(_))));
        assert!(matches!(derive_params(4, 2, 1, 5), Err(SchemeError::TrivialRegime(_))));
        assert!(matches!(derive_params(4, 0, 2, 5), Err(SchemeError::TrivialRegime(_))));
        assert!(matches!(derive_params(4, 2, 2, 6), Err(SchemeError::Field(_))));
        assert!(matches!(derive_params(5, 2, 2, 3), Err(SchemeError::Params(_))));
    }

    #[test]
    fn reduced_pair_is_coprime() {
        for big_n in 2..30 {
            for big_k in 1..big_n {
                let p = derive_params(big_n, big_k, 2, 31).unwrap();
                assert_eq!(p.n_reduced().gcd(&p.k_reduced()), 1);
                assert_eq!(p.file_len(), p.k_mds() * (p.n_reduced() - p.k_reduced()));
            }
        }
    }

    #[test]
    fn server_queries_of_worked_example() {
        let p = example_params();
        let q = example_query();
        let expect = |cols: [[usize; 3]; 3]| QueryMatrix::from_columns(5, &cols.map(|c| c.to_vec())).unwrap();
        assert_eq!(build_server_query(&q, 0, 0, &p).unwrap(), q);
        assert_eq!(
            build_server_query(&q, 0, 1, &p).unwrap(),
            expect([[4, 1, 2], [4, 1, 0], [3, 0, 4]])
        );
        assert_eq!(
            build_server_query(&q, 0, 2, &p).unwrap(),
            expect([[0, 2, 3], [4, 1, 0], [3, 0, 4]])
        );
        assert_eq!(
            build_server_query(&q, 0, 3, &p).unwrap(),
            expect([[1, 3, 4], [4, 1, 0], [3, 0, 4]])
        );
        assert_eq!(
            build_server_query(&q, 0, 4, &p).unwrap(),
            expect([[2, 4, 0], [4, 1, 0], [3, 0, 4]])
        );
        assert!(matches!(build_server_query(&q, 3, 0, &p), Err(SchemeError::Index { what: "file", .. })));
        assert!(matches!(build_server_query(&q, 0, 5, &p), Err(SchemeError::Index { what: "server", .. })));
    }

    #[test]
    fn query_validation() {
        assert!(matches!(
            QueryMatrix::from_columns(5, &[vec![1, 1, 0]]),
            Err(SchemeError::MalformedQuery(_))
        ));
        assert!(matches!(
            QueryMatrix::from_columns(5, &[vec![1, 5, 0]]),
            Err(SchemeError::MalformedQuery(_))
        ));
        assert!(QueryMatrix::new(2, 2, 3, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn master_query_columns_are_partial_permutations() {
        let p = example_params();
        let mut rng = stream(7, 0);
        for _ in 0..200 {
            let q = gen_master_query(&p, &mut rng);
            assert_eq!((q.rows(), q.cols()), (3, 3));
            for c in 0..3 {
                let mut col = q.column(c);
                col.sort_unstable();
                col.dedup();
                assert_eq!(col.len(), 3);
                assert!(col.iter().all(|&e| e < 5));
            }
        }
        let tiny = derive_params(2, 1, 2, 3).unwrap();
        let mut seen = [[0usize; 2]; 2];
        for _ in 0..400 {
            let q = gen_master_query(&tiny, &mut rng);
            for c in 0..2 {
                seen[c][q.get(0, c)] += 1;
            }
        }
        assert!(seen.iter().flatten().all(|&count| count > 100));
    }

    #[test]
    fn space_index_round_trips() {
        let p = derive_params(5, 3, 2, 7).unwrap();
        let size = p.query_space_size().unwrap();
        assert_eq!(size, 3600);
        for idx in (0..size).step_by(7) {
            let q = QueryMatrix::from_space_index(&p, idx);
            assert_eq!(q.space_index(), idx);
        }
        assert_eq!(derive_params(2, 1, 2, 3).unwrap().query_space_size(), Some(4));
    }

    /// Symbolic check of the answer table of the worked example: storage holds
    /// distinct markers so each answer identifies the symbols it summed.
    #[test]
    fn server_answers_of_worked_example() {
        let p = derive_params(5, 3, 3, 1_000_003).unwrap();
        let f = p.field();
        let q = example_query();
        // Distinct small markers; sums of three stay far below p.
        let marker = |i: u64, j: u64, t: u64| 1_000 * (i + 1) * (i + 1) * (i + 1) + 37 * j + t * 3 + 1;
        let storages: Vec<ServerStorage> = (0..5)
            .map(|t| {
                let frags = (0..3)
                    .map(|i| (0..2).map(|j| f.elem(marker(i, j, t as u64))).collect())
                    .collect();
                ServerStorage::new(&p, t, frags).unwrap()
            })
            .collect();
        let answer = |t: usize| server_answer(&storages[t], &build_server_query(&q, 0, t, &p).unwrap(), &p).unwrap();
        let w = |i: u64, j: u64, t: u64| f.elem(marker(i, j, t));
        let zero = f.zero();

        let a0 = answer(0);
        assert_eq!(a0.rounds()[0], None);
        assert_eq!(a0.rounds()[1], Some(w(0, 0, 0) + w(1, 1, 0) + w(2, 0, 0)));
        assert_eq!(a0.rounds()[2], Some(w(0, 1, 0) + w(1, 0, 0) + zero));
        let a1 = answer(1);
        assert_eq!(a1.rounds()[0], None);
        assert_eq!(a1.rounds()[1], Some(w(0, 1, 1) + w(1, 1, 1) + w(2, 0, 1)));
        assert_eq!(a1.rounds()[2], Some(w(1, 0, 1)));
        let a2 = answer(2);
        assert_eq!(a2.rounds()[0], Some(w(0, 0, 2)));
        assert_eq!(a2.rounds()[1], Some(w(1, 1, 2) + w(2, 0, 2)));
        assert_eq!(a2.rounds()[2], Some(w(1, 0, 2)));
        let a3 = answer(3);
        assert_eq!(a3.rounds()[0], Some(w(0, 1, 3)));
        assert_eq!(a3.rounds()[1], Some(w(1, 1, 3) + w(2, 0, 3)));
        assert_eq!(a3.rounds()[2], Some(w(1, 0, 3)));
        let a4 = answer(4);
        assert_eq!(a4.rounds()[0], None);
        assert_eq!(a4.rounds()[1], Some(w(1, 1, 4) + w(2, 0, 4)));
        assert_eq!(a4.rounds()[2], Some(w(0, 0, 4) + w(1, 0, 4)));

        let total: usize = (0..5).map(|t| answer(t).download_len()).sum();
        assert_eq!(total, 12);
        assert_eq!(realized_download(&q, 0, &p).unwrap(), 12);
    }

    #[test]
    fn server_rejects_malformed_queries() {
        let p = example_params();
        let storage = ServerStorage::new(&p, 0, vec![vec![p.field().zero(); 2]; 3]).unwrap();
        let wrong_shape = QueryMatrix::from_columns(5, &[vec![0, 1, 2], vec![0, 1, 2]]).unwrap();
        assert!(matches!(server_answer(&storage, &wrong_shape, &p), Err(SchemeError::MalformedQuery(_))));
        let wrong_alphabet = QueryMatrix::from_columns(6, &vec![vec![0, 1, 2]; 3]).unwrap();
        assert!(server_answer(&storage, &wrong_alphabet, &p).is_err());
    }

    #[test]
    fn worked_example_decodes() {
        let p = example_params();
        let mut rng = stream(3, 0);
        let sources: Vec<SourceFile> = (0..3).map(|_| SourceFile::random(&p, &mut rng)).collect();
        let (encoded, storages) = encode_system(&p, &sources).unwrap();
        for (t, storage) in storages.iter().enumerate() {
            for i in 0..3 {
                for j in 0..2 {
                    assert_eq!(storage.fragments()[i][j], encoded[i].symbol(j, t));
                }
            }
        }
        let out = retrieve_with_query(&example_query(), 0, &storages, &p, &p.code()).unwrap();
        assert_eq!(out.file, sources[0]);
        assert_eq!(out.download(), 12);
        assert_eq!(out.per_server, vec![2, 2, 3, 3, 2]);
    }

    #[test]
    fn zero_files_decode_to_zero() {
        let p = derive_params(6, 4, 3, 7).unwrap();
        let sources = vec![SourceFile::zeros(&p); 3];
        let (_, storages) = encode_system(&p, &sources).unwrap();
        assert!(storages.iter().flat_map(|s| s.stacked()).all(|e| e.is_zero()));
        let mut rng = stream(11, 0);
        for theta in 0..3 {
            let out = retrieve(theta, &storages, &p, &mut rng).unwrap();
            assert_eq!(out.file, SourceFile::zeros(&p));
        }
    }

    #[test]
    fn unit_rows_store_generator_columns() {
        let p = derive_params(5, 3, 2, 7).unwrap();
        let f = p.field();
        let code = p.code();
        let unit = |i: usize| (0..3).map(|c| f.elem(u64::from(c == i))).collect::<Vec<_>>();
        let sources = vec![
            SourceFile::new(&p, vec![unit(0), unit(1)]).unwrap(),
            SourceFile::new(&p, vec![unit(2), unit(0)]).unwrap(),
        ];
        let (_, storages) = encode_system(&p, &sources).unwrap();
        for (t, s) in storages.iter().enumerate() {
            let g = code.generator();
            assert_eq!(s.fragments()[0], vec![g.get(0, t), g.get(1, t)]);
            assert_eq!(s.fragments()[1], vec![g.get(2, t), g.get(0, t)]);
        }
    }

    #[test]
    fn any_k_storages_recover_every_file() {
        let p = derive_params(6, 4, 2, 11).unwrap();
        let code = p.code();
        let mut rng = stream(5, 0);
        let sources: Vec<SourceFile> = (0..2).map(|_| SourceFile::random(&p, &mut rng)).collect();
        let (_, storages) = encode_system(&p, &sources).unwrap();
        for mask in 0u32..64 {
            if mask.count_ones() != 4 {
                continue;
            }
            let chosen: Vec<usize> = (0..6).filter(|t| mask >> t & 1 == 1).collect();
            for (i, src) in sources.iter().enumerate() {
                for j in 0..p.lambda() {
                    let known: Vec<_> = chosen.iter().map(|&t| (t, storages[t].fragments()[i][j])).collect();
                    let cw = code.erasure_decode(&known).unwrap();
                    assert_eq!(code.message_of(&cw), &src.rows()[j][..]);
                }
            }
        }
    }

    #[test]
    fn decode_detects_misaligned_inputs() {
        let p = example_params();
        let q = example_query();
        let (_, storages) = encode_system(&p, &vec![SourceFile::zeros(&p); 3]).unwrap();
        let answers: Vec<_> = (0..5)
            .map(|t| server_answer(&storages[t], &build_server_query(&q, 0, t, &p).unwrap(), &p).unwrap())
            .collect();
        let code = p.code();
        assert!(matches!(decode(&answers[..4], &q, 0, &p, &code), Err(SchemeError::Dimension(_))));
        assert!(matches!(decode(&answers, &q, 3, &p, &code), Err(SchemeError::Index { .. })));
        let other_code = MdsCode::new(5, 2, 7).unwrap();
        assert!(matches!(decode(&answers, &q, 0, &p, &other_code), Err(SchemeError::Params(_))));
        let mut swapped = storages.clone();
        swapped.swap(0, 1);
        assert!(retrieve_with_query(&q, 0, &swapped, &p, &code).is_err());
    }

    #[test]
    fn randomized_correctness_small_grid() {
        for (big_n, big_k) in [(2, 1), (3, 2), (4, 2), (5, 2), (5, 3), (5, 4), (6, 4)] {
            for m in 2..=4 {
                let p = derive_params(big_n, big_k, m, 257).unwrap();
                let mut rng = stream(big_n as u64 * 100 + big_k as u64 * 10 + m as u64, 0);
                let sources: Vec<SourceFile> = (0..m).map(|_| SourceFile::random(&p, &mut rng)).collect();
                let (_, storages) = encode_system(&p, &sources).unwrap();
                for trial in 0..10 {
                    let theta = trial % m;
                    let out = retrieve(theta, &storages, &p, &mut rng).unwrap();
                    assert_eq!(out.file, sources[theta], "{p} theta={theta}");
                }
            }
        }
    }

    #[test]
    fn exhaustive_correctness_tiny_systems() {
        for (big_n, big_k, m) in [(2, 1, 2), (3, 2, 2), (4, 2, 3), (3, 1, 2)] {
            let p = derive_params(big_n, big_k, m, 5).unwrap();
            let code = p.code();
            let mut rng = stream(99, big_n as u64);
            let sources: Vec<SourceFile> = (0..m).map(|_| SourceFile::random(&p, &mut rng)).collect();
            let (_, storages) = encode_system(&p, &sources).unwrap();
            for idx in 0..p.query_space_size().unwrap() {
                let q = QueryMatrix::from_space_index(&p, idx);
                for theta in 0..m {
                    let out = retrieve_with_query(&q, theta, &storages, &p, &code).unwrap();
                    assert_eq!(out.file, sources[theta]);
                }
            }
        }
    }

    #[test]
    fn download_of_smallest_system_is_one_or_two() {
        let p = derive_params(2, 1, 2, 3).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for idx in 0..4 {
            let q = QueryMatrix::from_space_index(&p, idx);
            *counts.entry(realized_download(&q, 0, &p).unwrap()).or_insert(0) += 1;
        }
        assert_eq!(counts.into_iter().collect::<Vec<_>>(), vec![(1, 2), (2, 2)]);
    }

    #[test]
    fn shifted_column_covers_alphabet_d_times() {
        for (big_n, big_k) in [(4, 2), (6, 4), (6, 3), (9, 6), (5, 3)] {
            let p = derive_params(big_n, big_k, 2, 11).unwrap();
            let n = p.n_reduced();
            for base in 0..n {
                let mut counts = vec![0; n];
                for t in 0..big_n {
                    counts[(base + t) % n] += 1;
                }
                assert!(counts.iter().all(|&c| c == p.d()));
            }
        }
    }
}
