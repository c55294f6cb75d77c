//! Systematic Reed–Solomon `(N, K)` code over a prime field.
//!
//! A message `m` of length `K` is identified with the unique polynomial of
//! degree `< K` taking the values `m` at the points `0..K`; its codeword is
//! that polynomial evaluated at `0..N`. The first `K` symbols of a codeword are
//! therefore the message itself.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::gf::{FieldElement, FieldError, PrimeField};
use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodeError {
    #[error("invalid code parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("expected {expected} symbols, got {got}")]
    Length { expected: usize, got: usize },
    #[error("need at least {needed} known symbols, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("position {position} is out of range or repeated")]
    BadPosition { position: usize },
    #[error("known symbol at position {position} disagrees with the interpolated codeword")]
    CorruptCodeword { position: usize },
}

impl From<LinalgError> for CodeError {
    fn from(e: LinalgError) -> Self {
        // Every KxK submatrix of an MDS generator is invertible, so this only
        // fires on a broken generator.
        CodeError::Params(format!("generator submatrix: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codeword {
    symbols: Vec<FieldElement>,
}

impl Codeword {
    pub fn symbols(&self) -> &[FieldElement] {
        &self.symbols
    }

    pub fn into_symbols(self) -> Vec<FieldElement> {
        self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct MdsCode {
    n_total: usize,
    k_msg: usize,
    field: PrimeField,
    generator: Matrix,
}

impl MdsCode {
    pub fn new(n_total: usize, k_msg: usize, prime: u64) -> Result<Self, CodeError> {
        let field = PrimeField::new(prime)?;
        if k_msg == 0 || k_msg > n_total {
            return Err(CodeError::Params(format!(
                "need 0 < K <= N, got N={n_total}, K={k_msg}"
            )));
        }
        if (n_total as u64) > prime {
            return Err(CodeError::Params(format!(
                "field F_{prime} has fewer than N={n_total} evaluation points"
            )));
        }
        let mut generator = Matrix::zeros(field, k_msg, n_total);
        for i in 0..k_msg {
            for t in 0..n_total {
                generator.set(i, t, lagrange_basis(field, k_msg, i, t as u64));
            }
        }
        Ok(Self {
            n_total,
            k_msg,
            field,
            generator,
        })
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn k_msg(&self) -> usize {
        self.k_msg
    }

    pub fn field(&self) -> PrimeField {
        self.field
    }

    /// `K x N` generator matrix, identity in its first `K` columns.
    pub fn generator(&self) -> &Matrix {
        &self.generator
    }

    /// Evaluation points `0, 1, ..., N-1`.
    pub fn eval_points(&self) -> Vec<FieldElement> {
        (0..self.n_total as u64).map(|t| self.field.elem(t)).collect()
    }

    pub fn encode(&self, message: &[FieldElement]) -> Result<Codeword, CodeError> {
        if message.len() != self.k_msg {
            return Err(CodeError::Length {
                expected: self.k_msg,
                got: message.len(),
            });
        }
        for m in message {
            if m.prime() != self.field.prime() {
                return Err(FieldError::Mismatch {
                    left: self.field.prime(),
                    right: m.prime(),
                }
                .into());
            }
        }
        Ok(Codeword {
            symbols: self.generator.vec_mul(message)?,
        })
    }

    /// Wraps a full-length symbol vector after checking that it is a codeword.
    pub fn codeword(&self, symbols: Vec<FieldElement>) -> Result<Codeword, CodeError> {
        if symbols.len() != self.n_total {
            return Err(CodeError::Length {
                expected: self.n_total,
                got: symbols.len(),
            });
        }
        let re = self.encode(&symbols[..self.k_msg])?;
        if let Some(position) = (self.k_msg..self.n_total).find(|&t| re.symbols[t] != symbols[t]) {
            return Err(CodeError::CorruptCodeword { position });
        }
        Ok(re)
    }

    /// Recovers the codeword from at least `K` known `(position, symbol)` pairs.
    ///
    /// The `K` smallest positions determine the codeword; any further entries
    /// must agree with it.
    pub fn erasure_decode(&self, known: &[(usize, FieldElement)]) -> Result<Codeword, CodeError> {
        let mut sorted = BTreeMap::new();
        for &(position, value) in known {
            if position >= self.n_total || sorted.insert(position, value).is_some() {
                return Err(CodeError::BadPosition { position });
            }
        }
        if sorted.len() < self.k_msg {
            return Err(CodeError::InsufficientData {
                needed: self.k_msg,
                got: sorted.len(),
            });
        }
        let (positions, values): (Vec<usize>, Vec<FieldElement>) =
            sorted.iter().take(self.k_msg).map(|(&p, &v)| (p, v)).unzip();

        let message = if positions.iter().copied().eq(0..self.k_msg) {
            values
        } else {
            // c_S = m G_S  <=>  G_S^T m^T = c_S^T
            self.generator
                .select_columns(&positions)
                .transpose()
                .solve(&values)?
        };
        let codeword = self.encode(&message)?;
        for (&position, &value) in sorted.iter().skip(self.k_msg) {
            if codeword.symbols[position] != value {
                return Err(CodeError::CorruptCodeword { position });
            }
        }
        Ok(codeword)
    }

    /// Systematic part of a codeword.
    pub fn message_of<'a>(&self, codeword: &'a Codeword) -> &'a [FieldElement] {
        &codeword.symbols[..self.k_msg]
    }
}

/// `l_i(x)` for the Lagrange basis on points `0..k`.
fn lagrange_basis(field: PrimeField, k: usize, i: usize, x: u64) -> FieldElement {
    let xi = field.elem(i as u64);
    let x = field.elem(x);
    let mut num = field.one();
    let mut den = field.one();
    for j in (0..k).filter(|&j| j != i) {
        let xj = field.elem(j as u64);
        num *= x - xj;
        den *= xi - xj;
    }
    num * den.inv().expect("distinct interpolation points")
}
