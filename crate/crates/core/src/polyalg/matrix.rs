use std::fmt;
use std::ops::{Index, IndexMut, Mul};

use super::poly::OperatorPoly;
use super::rational::Rational;
use crate::error::{Error, Result};

/// Dense row-major matrix of operator polynomials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatorMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<OperatorPoly>,
}

impl OperatorMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        OperatorMatrix {
            rows,
            cols,
            entries: vec![OperatorPoly::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = OperatorPoly::one();
        }
        m
    }

    pub fn from_entries(rows: usize, cols: usize, entries: Vec<OperatorPoly>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        Ok(OperatorMatrix { rows, cols, entries })
    }

    pub fn from_rows(rows: Vec<Vec<OperatorPoly>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_entries(r, c, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[OperatorPoly] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(OperatorPoly::is_zero)
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| i == j || self[(i, j)].is_zero()))
    }

    pub fn column(&self, j: usize) -> Vec<OperatorPoly> {
        (0..self.rows).map(|i| self[(i, j)].clone()).collect()
    }

    pub fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for j in 0..self.cols {
            self.entries.swap(a * self.cols + j, b * self.cols + j);
        }
    }

    pub fn swap_cols(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for i in 0..self.rows {
            self.entries.swap(i * self.cols + a, i * self.cols + b);
        }
    }

    /// row[target] += factor * row[source]
    pub fn add_row_multiple(&mut self, target: usize, source: usize, factor: &OperatorPoly) {
        if factor.is_zero() {
            return;
        }
        for j in 0..self.cols {
            let delta = factor * &self[(source, j)];
            let t = &self[(target, j)] + &delta;
            self[(target, j)] = t;
        }
    }

    /// col[target] += factor * col[source]
    pub fn add_col_multiple(&mut self, target: usize, source: usize, factor: &OperatorPoly) {
        if factor.is_zero() {
            return;
        }
        for i in 0..self.rows {
            let delta = &self[(i, source)] * factor;
            let t = &self[(i, target)] + &delta;
            self[(i, target)] = t;
        }
    }

    pub fn scale_row(&mut self, row: usize, c: &Rational) {
        for j in 0..self.cols {
            self[(row, j)] = self[(row, j)].scale(c);
        }
    }

    pub fn try_mul(&self, rhs: &OperatorMatrix) -> Result<OperatorMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = OperatorPoly::zero();
                for k in 0..self.cols {
                    let a = &self[(i, k)];
                    let b = &rhs[(k, j)];
                    if !a.is_zero() && !b.is_zero() {
                        acc = &acc + &(a * b);
                    }
                }
                out[(i, j)] = acc;
            }
        }
        Ok(out)
    }

    /// Determinant by cofactor expansion along the first row.
    pub fn det(&self) -> Result<OperatorPoly> {
        if self.rows != self.cols {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let idx: Vec<usize> = (0..self.cols).collect();
        Ok(self.minor_det(0, &idx))
    }

    fn minor_det(&self, row: usize, cols: &[usize]) -> OperatorPoly {
        match cols.len() {
            0 => OperatorPoly::one(),
            1 => self[(row, cols[0])].clone(),
            _ => {
                let mut acc = OperatorPoly::zero();
                for (k, &c) in cols.iter().enumerate() {
                    let entry = &self[(row, c)];
                    if entry.is_zero() {
                        continue;
                    }
                    let rest: Vec<usize> = cols
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != k)
                        .map(|(_, &c)| c)
                        .collect();
                    let term = entry * &self.minor_det(row + 1, &rest);
                    acc = if k % 2 == 0 { &acc + &term } else { &acc - &term };
                }
                acc
            }
        }
    }

    /// Float coefficient vectors of every entry, indexed `[row][col][power]`.
    pub fn to_f64_coeffs(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)].to_f64_coeffs()).collect())
            .collect()
    }
}

pub fn det(m: &OperatorMatrix) -> Result<OperatorPoly> {
    m.det()
}

impl Index<(usize, usize)> for OperatorMatrix {
    type Output = OperatorPoly;

    fn index(&self, (i, j): (usize, usize)) -> &OperatorPoly {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        &self.entries[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for OperatorMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut OperatorPoly {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        &mut self.entries[i * self.cols + j]
    }
}

impl Mul for &OperatorMatrix {
    type Output = OperatorMatrix;

    /// Panics on a shape mismatch; use [`OperatorMatrix::try_mul`] otherwise.
    fn mul(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        self.try_mul(rhs).expect("shape mismatch")
    }
}

impl fmt::Display for OperatorMatrix {
    /// Entries comma-separated, rows newline-separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| self[(i, j)].to_string()).collect();
            writeln!(f, "{}", row.join(", "))?;
        }
        Ok(())
    }
}
