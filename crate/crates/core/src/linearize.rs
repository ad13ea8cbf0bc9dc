//! Equilibria, Jacobian linearization and stability of nonlinear systems
//! `x' = f(x, u)`.
//!
//! When several equilibria exist for the same input, [`find_equilibrium`]
//! returns whichever one damped Newton reaches from the supplied guess. No
//! attempt is made to check that an initial state lies in the basin of
//! attraction of the equilibrium; callers are expected to know this.

use nalgebra::{DMatrix, DVector};
use num_traits::{Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::polyalg::{rational_from_float, OperatorMatrix, OperatorPoly, Rational, DEFAULT_MAX_DENOMINATOR};

/// Axis-aligned region of valid states. Infinite bounds are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl StateBox {
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Clamps in place and reports whether anything moved.
    pub fn clamp(&self, x: &mut DVector<f64>) -> bool {
        let mut moved = false;
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(self.upper.iter())) {
            let c = v.clamp(*lo, *hi);
            if c != *v {
                *v = c;
                moved = true;
            }
        }
        moved
    }
}

/// A time-invariant nonlinear system `x' = f(x, u)`.
///
/// Implementations must be re-entrant: `rhs` may be called from several
/// threads at once.
pub trait NonlinearSystem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(df/dx, df/du)` when known in closed form.
    fn analytic_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Option<Result<(DMatrix<f64>, DMatrix<f64>)>> {
        None
    }

    fn state_domain(&self) -> Option<StateBox> {
        None
    }
}

type RhsFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// Closure-backed system, handy for tests and ad hoc models.
pub struct FnSystem {
    state_dim: usize,
    control_dim: usize,
    rhs: Box<RhsFn>,
    domain: Option<StateBox>,
}

impl FnSystem {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        rhs: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        FnSystem {
            state_dim,
            control_dim,
            rhs: Box::new(rhs),
            domain: None,
        }
    }

    pub fn with_domain(mut self, domain: StateBox) -> Self {
        self.domain = Some(domain);
        self
    }
}

impl NonlinearSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let out = (self.rhs)(x, u);
        if out.len() != self.state_dim {
            return Err(Error::Shape(format!(
                "rhs returned {} values, expected {}",
                out.len(),
                self.state_dim
            )));
        }
        Ok(out)
    }

    fn state_domain(&self) -> Option<StateBox> {
        self.domain.clone()
    }
}

/// Equilibrium plus the constant Jacobians of the system there.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedSystem {
    pub x_e: DVector<f64>,
    pub u_e: DVector<f64>,
    pub a_e: DMatrix<f64>,
    pub b_e: DMatrix<f64>,
    pub asymptotically_stable: bool,
}

impl LinearizedSystem {
    pub fn state_dim(&self) -> usize {
        self.x_e.len()
    }

    pub fn control_dim(&self) -> usize {
        self.u_e.len()
    }

    /// Stacked `[x_e; u_e]`.
    pub fn operating_point(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.x_e.len() + self.u_e.len(),
            self.x_e.iter().chain(self.u_e.iter()).copied(),
        )
    }

    pub fn operator_matrix(&self) -> Result<OperatorMatrix> {
        build_operator_matrix(&self.a_e, &self.b_e)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EquilibriumOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

const MAX_HALVINGS: usize = 30;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped Newton iteration on `x -> f(x, u_e)`, halving the step until the
/// residual decreases.
pub fn find_equilibrium(
    sys: &dyn NonlinearSystem,
    u_e: &DVector<f64>,
    x_guess: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let domain = sys.state_domain();
    if let Some(d) = &domain {
        if !d.contains(x_guess) {
            return Err(Error::InvalidArgument(
                "initial guess lies outside the state domain".into(),
            ));
        }
    }

    let mut x = x_guess.clone();
    let mut f = sys.rhs(&x, u_e)?;
    let mut residual = inf_norm(&f);
    for iteration in 0..max_iter {
        if residual <= tol {
            return Ok(x);
        }
        let (jx, _) = jacobians(sys, &x, u_e)?;
        let step = jx
            .lu()
            .solve(&(-&f))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularJacobian { iteration })?;

        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &x + &step * lambda;
            let inside = domain.as_ref().is_none_or(|d| d.contains(&cand));
            if inside {
                if let Ok(fc) = sys.rhs(&cand, u_e) {
                    let rc = inf_norm(&fc);
                    if rc.is_finite() && rc < residual {
                        accepted = Some((cand, fc, rc));
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((xn, fn_, rn)) => {
                x = xn;
                f = fn_;
                residual = rn;
            }
            None => {
                return Err(Error::NoConvergence {
                    iterations: iteration,
                    residual,
                })
            }
        }
    }
    if residual <= tol {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: max_iter,
            residual,
        })
    }
}

/// `(A_e, B_e) = (df/dx, df/du)` at `(x, u)`: analytic when the system
/// provides them, central differences otherwise.
pub fn jacobians(
    sys: &dyn NonlinearSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if let Some(j) = sys.analytic_jacobians(x, u) {
        return j;
    }
    let a = central_difference(x.len(), x, |xp| sys.rhs(xp, u))?;
    let b = central_difference(u.len(), u, |up| sys.rhs(x, up))?;
    Ok((a, b))
}

fn central_difference(
    n: usize,
    at: &DVector<f64>,
    f: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let h = (1e-6 * at[i].abs()).max(1e-6);
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[i] += h;
        minus[i] -= h;
        let eval = |p: &DVector<f64>| {
            f(p).map_err(|e| Error::NotDifferentiable(format!("coordinate {i}: {e}")))
        };
        let col = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotDifferentiable(format!(
                "non-finite difference in coordinate {i}"
            )));
        }
        cols.push(col);
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(rows, n, |r, c| cols[c][r]))
}

/// Coefficients `[1, c1, ..., cn]` of `det(sI - A)` by Faddeev-LeVerrier,
/// in exact arithmetic on the binary values of `A`.
pub fn characteristic_polynomial(a: &DMatrix<f64>) -> Result<Vec<Rational>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    let mut am = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            am.push(Rational::from_float(v).ok_or(Error::NonFinite(v))?);
        }
    }
    let matmul = |x: &[Rational], y: &[Rational]| {
        let mut out = vec![Rational::zero(); n * n];
        for i in 0..n {
            for k in 0..n {
                if x[i * n + k].is_zero() {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += &x[i * n + k] * &y[k * n + j];
                }
            }
        }
        out
    };

    let mut coeffs = vec![Rational::from_integer(1.into())];
    let mut m = vec![Rational::zero(); n * n];
    for k in 1..=n {
        // M_k = A M_{k-1} + c_{k-1} I ; c_k = -tr(A M_k) / k
        let mut mk = matmul(&am, &m);
        for i in 0..n {
            mk[i * n + i] += &coeffs[k - 1];
        }
        let amk = matmul(&am, &mk);
        let trace: Rational = (0..n).map(|i| amk[i * n + i].clone()).sum();
        coeffs.push(-trace / Rational::from_integer((k as i64).into()));
        m = mk;
    }
    Ok(coeffs)
}

const MARGINAL_TOL: f64 = 1e-12;

/// Routh-Hurwitz test on the characteristic polynomial of `A`.
///
/// Returns [`Error::MarginalStability`] when a first-column entry of the
/// Routh array vanishes to within `1e-12` relative to the terms it was
/// computed from.
pub fn check_asymptotic_stability(a: &DMatrix<f64>) -> Result<bool> {
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument("empty state matrix".into()));
    }
    let coeffs = characteristic_polynomial(a)?;
    let n = coeffs.len() - 1;
    if coeffs.iter().any(Signed::is_negative) {
        return Ok(false);
    }

    let f = |r: &Rational| r.to_f64().unwrap_or(f64::NAN);
    let mut prev: Vec<Rational> = coeffs.iter().step_by(2).cloned().collect();
    let mut cur: Vec<Rational> = coeffs.iter().skip(1).step_by(2).cloned().collect();
    let mut first_col = vec![prev[0].clone()];
    for _ in 0..n {
        let lead = cur.first().cloned().unwrap_or_else(Rational::zero);
        let scale = prev.iter().chain(cur.iter()).map(|r| f(r).abs()).fold(0.0, f64::max);
        if f(&lead).abs() <= MARGINAL_TOL * scale {
            return Err(Error::MarginalStability);
        }
        first_col.push(lead.clone());
        let next: Vec<Rational> = (0..prev.len().saturating_sub(1))
            .map(|i| {
                let p1 = prev.get(i + 1).cloned().unwrap_or_else(Rational::zero);
                let c1 = cur.get(i + 1).cloned().unwrap_or_else(Rational::zero);
                (&lead * &p1 - &prev[0] * &c1) / &lead
            })
            .collect();
        prev = std::mem::replace(&mut cur, next);
        if cur.is_empty() {
            break;
        }
    }
    let sign_changes = first_col
        .windows(2)
        .filter(|w| w[0].is_positive() != w[1].is_positive())
        .count();
    Ok(sign_changes == 0)
}

/// `H = [A - I*dt | B]` with float entries converted to bounded rationals.
pub fn build_operator_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<OperatorMatrix> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Shape(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let m = b.ncols();
    let mut h = OperatorMatrix::zeros(n, n + m);
    for i in 0..n {
        for j in 0..n {
            let c = rational_from_float(a[(i, j)], DEFAULT_MAX_DENOMINATOR)?;
            let mut coeffs = vec![c];
            if i == j {
                coeffs.push(Rational::from_integer((-1).into()));
            }
            h[(i, j)] = OperatorPoly::new(coeffs);
        }
        for j in 0..m {
            h[(i, n + j)] =
                OperatorPoly::constant(rational_from_float(b[(i, j)], DEFAULT_MAX_DENOMINATOR)?);
        }
    }
    Ok(h)
}

/// Equilibrium for `u_e`, Jacobians there, and the stability verdict. A
/// marginal verdict is reported as not asymptotically stable.
pub fn linearize(
    sys: &dyn NonlinearSystem,
    u_e: &DVector<f64>,
    x_guess: &DVector<f64>,
    opts: EquilibriumOptions,
) -> Result<LinearizedSystem> {
    let x_e = find_equilibrium(sys, u_e, x_guess, opts.tol, opts.max_iter)?;
    let (a_e, b_e) = jacobians(sys, &x_e, u_e)?;
    let asymptotically_stable = match check_asymptotic_stability(&a_e) {
        Ok(s) => s,
        Err(Error::MarginalStability) => {
            log::warn!("equilibrium is marginally stable");
            false
        }
        Err(e) => return Err(e),
    };
    Ok(LinearizedSystem {
        x_e,
        u_e: u_e.clone(),
        a_e,
        b_e,
        asymptotically_stable,
    })
}
