//! Smith normal form over the operator ring.
//!
//! Every row operation applied to the working matrix is mirrored on `W`, and
//! every column operation on `V`, so `W * H * V = D` holds at every step.

use num_traits::One;

use super::matrix::OperatorMatrix;
use super::poly::OperatorPoly;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmithDecomposition {
    pub d: OperatorMatrix,
    pub w: OperatorMatrix,
    pub v: OperatorMatrix,
}

impl SmithDecomposition {
    /// Nonzero diagonal entries followed by zeros, one per `min(rows, cols)`.
    pub fn diagonal(&self) -> Vec<OperatorPoly> {
        let n = self.d.rows().min(self.d.cols());
        (0..n).map(|i| self.d[(i, i)].clone()).collect()
    }

    /// Checks every structural invariant against the original matrix.
    pub fn verify(&self, h: &OperatorMatrix) -> std::result::Result<(), String> {
        let whv = self
            .w
            .try_mul(h)
            .and_then(|wh| wh.try_mul(&self.v))
            .map_err(|e| e.to_string())?;
        if whv != self.d {
            return Err("W*H*V != D".into());
        }
        if !self.d.is_diagonal() {
            return Err("D is not diagonal".into());
        }
        for (name, m) in [("W", &self.w), ("V", &self.v)] {
            let det = m.det().map_err(|e| e.to_string())?;
            if det.is_zero() || !det.is_constant() {
                return Err(format!("det({name}) = {det} is not a nonzero constant"));
            }
        }
        let diag = self.diagonal();
        let mut seen_zero = false;
        for (i, e) in diag.iter().enumerate() {
            if e.is_zero() {
                seen_zero = true;
                continue;
            }
            if seen_zero {
                return Err(format!("nonzero diagonal entry {i} after a zero entry"));
            }
            if !e.leading().is_some_and(One::is_one) {
                return Err(format!("diagonal entry {i} ({e}) is not monic"));
            }
            if let Some(next) = diag.get(i + 1).filter(|n| !n.is_zero()) {
                let (_, r) = next.div_rem(e).map_err(|e| e.to_string())?;
                if !r.is_zero() {
                    return Err(format!("entry {i} does not divide entry {}", i + 1));
                }
            }
        }
        Ok(())
    }
}

/// Position of the lowest-degree nonzero entry in the trailing block starting
/// at `(k, k)`, ties broken row-major.
fn find_pivot(m: &OperatorMatrix, k: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, (usize, usize))> = None;
    for i in k..m.rows() {
        for j in k..m.cols() {
            if let Some(deg) = m[(i, j)].degree() {
                if best.is_none_or(|(d, _)| deg < d) {
                    best = Some((deg, (i, j)));
                }
            }
        }
    }
    best.map(|(_, pos)| pos)
}

pub fn smith_normal_form(h: &OperatorMatrix) -> Result<SmithDecomposition> {
    if h.is_zero() {
        return Err(Error::InvalidArgument(
            "smith normal form of the zero matrix".into(),
        ));
    }
    let (rows, cols) = (h.rows(), h.cols());
    let mut m = h.clone();
    let mut w = OperatorMatrix::identity(rows);
    let mut v = OperatorMatrix::identity(cols);

    for k in 0..rows.min(cols) {
        loop {
            let Some((pi, pj)) = find_pivot(&m, k) else {
                return finish(m, w, v);
            };
            m.swap_rows(k, pi);
            w.swap_rows(k, pi);
            m.swap_cols(k, pj);
            v.swap_cols(k, pj);

            let pivot = m[(k, k)].clone();
            let mut clean = true;
            for i in k + 1..rows {
                if m[(i, k)].is_zero() {
                    continue;
                }
                let (q, r) = m[(i, k)].div_rem(&pivot)?;
                let neg_q = -&q;
                m.add_row_multiple(i, k, &neg_q);
                w.add_row_multiple(i, k, &neg_q);
                clean &= r.is_zero();
            }
            for j in k + 1..cols {
                if m[(k, j)].is_zero() {
                    continue;
                }
                let (q, r) = m[(k, j)].div_rem(&pivot)?;
                let neg_q = -&q;
                m.add_col_multiple(j, k, &neg_q);
                v.add_col_multiple(j, k, &neg_q);
                clean &= r.is_zero();
            }
            if !clean {
                // a remainder of lower degree now exists; repivot
                continue;
            }

            // divisibility repair: pull a non-divisible row into row k
            let mut repaired = false;
            'outer: for i in k + 1..rows {
                for j in k + 1..cols {
                    if m[(i, j)].is_zero() {
                        continue;
                    }
                    let (_, r) = m[(i, j)].div_rem(&pivot)?;
                    if !r.is_zero() {
                        let one = OperatorPoly::one();
                        m.add_row_multiple(k, i, &one);
                        w.add_row_multiple(k, i, &one);
                        repaired = true;
                        break 'outer;
                    }
                }
            }
            if !repaired {
                break;
            }
        }

        let lc = m[(k, k)].leading().cloned().expect("pivot is nonzero");
        if !lc.is_one() {
            let inv = lc.recip();
            m.scale_row(k, &inv);
            w.scale_row(k, &inv);
        }
    }
    finish(m, w, v)
}

fn finish(d: OperatorMatrix, w: OperatorMatrix, v: OperatorMatrix) -> Result<SmithDecomposition> {
    debug_assert!(d.is_diagonal());
    Ok(SmithDecomposition { d, w, v })
}
