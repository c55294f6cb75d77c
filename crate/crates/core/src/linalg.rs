//! Dense matrices over a prime field: rank, determinant and square solves by
//! Gaussian elimination.

use std::fmt;

use thiserror::Error;

use crate::gf::{FieldElement, PrimeField};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix is singular")]
    Singular,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Matrix {
    field: PrimeField,
    rows: usize,
    cols: usize,
    data: Vec<FieldElement>,
}

impl Matrix {
    pub fn zeros(field: PrimeField, rows: usize, cols: usize) -> Self {
        Self {
            field,
            rows,
            cols,
            data: vec![field.zero(); rows * cols],
        }
    }

    pub fn identity(field: PrimeField, size: usize) -> Self {
        let mut m = Self::zeros(field, size, size);
        for i in 0..size {
            m.set(i, i, field.one());
        }
        m
    }

    /// Builds a matrix from row vectors; every row must have `cols` entries.
    pub fn from_rows(
        field: PrimeField,
        cols: usize,
        rows: impl IntoIterator<Item = Vec<FieldElement>>,
    ) -> Result<Self, LinalgError> {
        let mut data = Vec::new();
        let mut count = 0;
        for row in rows {
            if row.len() != cols {
                return Err(LinalgError::Dimension {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend(row);
            count += 1;
        }
        Ok(Self {
            field,
            rows: count,
            cols,
            data,
        })
    }

    #[inline]
    pub fn field(&self) -> PrimeField {
        self.field
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> FieldElement {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: FieldElement) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[FieldElement] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<FieldElement> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.field, self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Keeps the listed columns, in the order given.
    pub fn select_columns(&self, columns: &[usize]) -> Self {
        let mut out = Self::zeros(self.field, self.rows, columns.len());
        for r in 0..self.rows {
            for (j, &c) in columns.iter().enumerate() {
                out.set(r, j, self.get(r, c));
            }
        }
        out
    }

    /// Keeps the listed rows, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self {
            field: self.field,
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[FieldElement]) -> Result<Vec<FieldElement>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::Dimension {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v)
                    .fold(self.field.zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect())
    }

    /// `v * self` for a row vector `v`.
    pub fn vec_mul(&self, v: &[FieldElement]) -> Result<Vec<FieldElement>, LinalgError> {
        if v.len() != self.rows {
            return Err(LinalgError::Dimension {
                expected: self.rows,
                got: v.len(),
            });
        }
        let mut out = vec![self.field.zero(); self.cols];
        for (r, &coef) in v.iter().enumerate() {
            if coef.is_zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += coef * a;
            }
        }
        Ok(out)
    }

    /// Reduces `self` in place to row echelon form, returning the pivot columns.
    /// Pivots are the first nonzero entry found scanning columns left to right.
    fn echelon(&mut self) -> Vec<usize> {
        let mut pivots = Vec::new();
        let mut pivot_row = 0;
        for col in 0..self.cols {
            if pivot_row == self.rows {
                break;
            }
            let Some(found) = (pivot_row..self.rows).find(|&r| !self.get(r, col).is_zero()) else {
                continue;
            };
            self.swap_rows(found, pivot_row);
            let inv = self.get(pivot_row, col).inv().expect("pivot is nonzero");
            for r in pivot_row + 1..self.rows {
                let factor = self.get(r, col) * inv;
                if factor.is_zero() {
                    continue;
                }
                for c in col..self.cols {
                    let v = self.get(r, c) - factor * self.get(pivot_row, c);
                    self.set(r, c, v);
                }
            }
            pivots.push(col);
            pivot_row += 1;
        }
        pivots
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }

    pub fn rank(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        self.clone().echelon().len()
    }

    pub fn determinant(&self) -> Result<FieldElement, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::Dimension {
                expected: self.rows,
                got: self.cols,
            });
        }
        let mut m = self.clone();
        let mut det = self.field.one();
        for col in 0..m.cols {
            let Some(found) = (col..m.rows).find(|&r| !m.get(r, col).is_zero()) else {
                return Ok(self.field.zero());
            };
            if found != col {
                m.swap_rows(found, col);
                det = -det;
            }
            let pivot = m.get(col, col);
            det *= pivot;
            let inv = pivot.inv().expect("pivot is nonzero");
            for r in col + 1..m.rows {
                let factor = m.get(r, col) * inv;
                if factor.is_zero() {
                    continue;
                }
                for c in col..m.cols {
                    let v = m.get(r, c) - factor * m.get(col, c);
                    m.set(r, c, v);
                }
            }
        }
        Ok(det)
    }

    /// Solves `self * x = b` for square invertible `self`.
    pub fn solve(&self, b: &[FieldElement]) -> Result<Vec<FieldElement>, LinalgError> {
        let n = self.rows;
        if self.cols != n {
            return Err(LinalgError::Dimension {
                expected: n,
                got: self.cols,
            });
        }
        if b.len() != n {
            return Err(LinalgError::Dimension {
                expected: n,
                got: b.len(),
            });
        }
        // Augmented [A | b].
        let mut aug = Self::zeros(self.field, n, n + 1);
        for r in 0..n {
            for c in 0..n {
                aug.set(r, c, self.get(r, c));
            }
            aug.set(r, n, b[r]);
        }
        let pivots = aug.echelon();
        if pivots.len() < n || pivots.last() == Some(&n) {
            return Err(LinalgError::Singular);
        }
        let mut x = vec![self.field.zero(); n];
        for r in (0..n).rev() {
            let mut acc = aug.get(r, n);
            for c in r + 1..n {
                acc -= aug.get(r, c) * x[c];
            }
            x[r] = acc * aug.get(r, r).inv().expect("pivot is nonzero");
        }
        Ok(x)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} over {}", self.rows, self.cols, self.field)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f7() -> PrimeField {
        PrimeField::new(7).unwrap()
    }

    fn mat(field: PrimeField, rows: &[&[u64]]) -> Matrix {
        let cols = rows.first().map_or(0, |r| r.len());
        Matrix::from_rows(
            field,
            cols,
            rows.iter().map(|r| r.iter().map(|&v| field.elem(v)).collect()),
        )
        .unwrap()
    }

    #[test]
    fn rank_of_small_matrices() {
        let f = f7();
        assert_eq!(Matrix::zeros(f, 0, 6).rank(), 0);
        assert_eq!(Matrix::zeros(f, 3, 3).rank(), 0);
        assert_eq!(Matrix::identity(f, 4).rank(), 4);
        // Second row is 2x the first mod 7.
        assert_eq!(mat(f, &[&[1, 2, 3], &[2, 4, 6], &[0, 0, 1]]).rank(), 2);
        // Rank depends on the characteristic: rows sum to zero only mod 2.
        let f2 = PrimeField::new(2).unwrap();
        let m = [&[1u64, 1, 0][..], &[0, 1, 1], &[1, 0, 1]];
        assert_eq!(mat(f2, &m).rank(), 2);
        assert_eq!(mat(f, &m).rank(), 3);
    }

    #[test]
    fn determinant_and_solve() {
        let f = f7();
        let a = mat(f, &[&[2, 1], &[1, 1]]);
        assert_eq!(a.determinant().unwrap().value(), 1);
        let x = a.solve(&[f.elem(3), f.elem(2)]).unwrap();
        assert_eq!(a.mul_vec(&x).unwrap(), vec![f.elem(3), f.elem(2)]);
        let s = mat(f, &[&[1, 2], &[2, 4]]);
        assert_eq!(s.determinant().unwrap().value(), 0);
        assert_eq!(s.solve(&[f.one(), f.one()]), Err(LinalgError::Singular));
    }

    #[test]
    fn dimension_errors() {
        let f = f7();
        assert!(Matrix::from_rows(f, 2, vec![vec![f.one()]]).is_err());
        let a = Matrix::identity(f, 2);
        assert!(a.mul_vec(&[f.one()]).is_err());
        assert!(a.vec_mul(&[f.one(); 3]).is_err());
        assert!(Matrix::zeros(f, 2, 3).determinant().is_err());
    }

    proptest! {
        #[test]
        fn rank_invariant_under_permutations(
            entries in prop::collection::vec(0u64..7, 12),
            row_perm in Just((0..3usize).collect::<Vec<_>>()).prop_shuffle(),
            col_perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let f = f7();
            let m = Matrix::from_rows(
                f,
                4,
                entries.chunks(4).map(|c| c.iter().map(|&v| f.elem(v)).collect()),
            ).unwrap();
            let r = m.rank();
            prop_assert_eq!(m.select_rows(&row_perm).rank(), r);
            prop_assert_eq!(m.select_columns(&col_perm).rank(), r);
            prop_assert_eq!(m.transpose().rank(), r);
        }

        #[test]
        fn solve_round_trips(entries in prop::collection::vec(0u64..7, 9), x in prop::collection::vec(0u64..7, 3)) {
            let f = f7();
            let a = Matrix::from_rows(
                f,
                3,
                entries.chunks(3).map(|c| c.iter().map(|&v| f.elem(v)).collect()),
            ).unwrap();
            let x: Vec<_> = x.into_iter().map(|v| f.elem(v)).collect();
            let b = a.mul_vec(&x).unwrap();
            let nonsingular = !a.determinant().unwrap().is_zero();
            prop_assert_eq!(nonsingular, a.rank() == 3);
            if nonsingular {
                prop_assert_eq!(a.solve(&b).unwrap(), x);
            }
        }
    }
}
