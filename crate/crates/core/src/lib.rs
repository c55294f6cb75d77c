//! Private information retrieval from MDS-coded distributed storage.
//!
//! `M` files are stored on `N` servers with an `(N, K)` Reed–Solomon code.
//! The retrieval scheme reaches the coded PIR capacity
//! `(1 + K/N + ... + (K/N)^(M-1))^-1` with file length `K (N - K) / gcd(N, K)`.
//!
//! * [`gf`], [`linalg`], [`rs`]: prime-field arithmetic, matrices, the code.
//! * [`scheme`]: parameters, queries, server answers and decoding.
//! * [`analysis`]: exact rate formulas, file-length bounds, rank and privacy checks.
//! * [`sim`]: seeded Monte-Carlo and exhaustive experiments.
//! * [`store`]: JSON storage and source files.
//! * [`net`]: TCP servers and the networked client.

pub mod analysis;
pub mod gf;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod rs;
pub mod scheme;
pub mod sim;
pub mod store;

pub use gf::{FieldElement, FieldError, PrimeField};
pub use rs::{CodeError, Codeword, MdsCode};
pub use scheme::{
    build_server_query, decode, derive_params, encode_system, gen_master_query, retrieve,
    retrieve_with_query, server_answer, AnswerVector, EncodedFile, QueryMatrix, Retrieval,
    SchemeError, ServerStorage, SourceFile, SystemParams,
};
