//! Multi-output covariance functions whose sample paths satisfy `H z = 0`.
//!
//! A Smith decomposition `D = W H V` decouples the system into latent
//! dimensions `D_ii h_i = 0`. Each latent dimension gets its own kernel:
//!
//! * a nonzero constant `D_ii` forces `h_i = 0` and contributes nothing;
//! * a zero `D_ii` leaves `h_i` free and gets a squared-exponential kernel;
//! * a polynomial `D_ii` with distinct real roots `r` gets the kernel
//!   `sum_r exp(r t) exp(r t')` spanned by its solutions.
//!
//! The output covariance is `V k(t, t') V'^T`, where `V` acts on `t` and `V'`
//! on `t'`. Mixed derivatives of the SE kernel come from the Hermite form
//! `d^n/dr^n exp(-(s r)^2) = (-s)^n H_n(s r) exp(-(s r)^2)`.

use nalgebra::{DMatrix, DVector};
use num_traits::{Signed, Zero};

use crate::error::{Error, Result};
use crate::linearize::LinearizedSystem;
use crate::polyalg::rational::to_f64;
use crate::polyalg::{smith_normal_form, OperatorMatrix, OperatorPoly, Rational, SmithDecomposition};

#[derive(Clone, Debug, PartialEq)]
pub enum LatentKernel {
    /// `h_i = 0`
    Zero,
    /// free dimension, squared-exponential kernel
    Se,
    /// sum of `exp(r t) exp(r t')` over distinct real roots `r`
    Solution(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentKernelSpec(pub Vec<LatentKernel>);

impl LatentKernelSpec {
    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn se_count(&self) -> usize {
        self.0.iter().filter(|k| matches!(k, LatentKernel::Se)).count()
    }
}

/// Classifies each diagonal entry of `D`. Columns beyond the diagonal are
/// free (zero) dimensions.
pub fn construct_latent_kernel(d: &OperatorMatrix) -> Result<LatentKernelSpec> {
    if !d.is_diagonal() {
        return Err(Error::InvalidArgument("latent kernels need a diagonal D".into()));
    }
    let kernels = (0..d.cols())
        .map(|i| {
            let entry = if i < d.rows() {
                d[(i, i)].clone()
            } else {
                OperatorPoly::zero()
            };
            classify(i, &entry)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentKernelSpec(kernels))
}

fn classify(index: usize, p: &OperatorPoly) -> Result<LatentKernel> {
    match p.degree() {
        None => Ok(LatentKernel::Se),
        Some(0) => Ok(LatentKernel::Zero),
        Some(deg) => {
            let unsupported = |reason| Error::UnsupportedLatent {
                index,
                poly: p.to_string(),
                reason,
            };
            if p.gcd(&p.derivative()).degree() != Some(0) {
                return Err(unsupported("repeated roots"));
            }
            let roots = real_roots(p);
            if roots.len() != deg {
                return Err(unsupported("complex roots"));
            }
            Ok(LatentKernel::Solution(roots))
        }
    }
}

fn sturm_sequence(p: &OperatorPoly) -> Vec<OperatorPoly> {
    let mut seq = vec![p.clone(), p.derivative()];
    loop {
        let n = seq.len();
        if seq[n - 1].is_zero() {
            seq.pop();
            break;
        }
        let (_, r) = seq[n - 2].div_rem(&seq[n - 1]).expect("nonzero divisor");
        if r.is_zero() {
            break;
        }
        seq.push(-r);
    }
    seq
}

fn sign_changes(values: impl Iterator<Item = Rational>) -> usize {
    let signs: Vec<bool> = values.filter(|v| !v.is_zero()).map(|v| v.is_positive()).collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

fn variations_at(seq: &[OperatorPoly], x: &Rational) -> usize {
    sign_changes(seq.iter().map(|q| q.eval(x)))
}

/// Distinct real roots of a squarefree polynomial, ascending. Isolation is
/// exact (Sturm sequences over the rationals); refinement is bisection.
fn real_roots(p: &OperatorPoly) -> Vec<f64> {
    let seq = sturm_sequence(p);
    let lc = p.leading().expect("nonzero").abs();
    let bound = p
        .coeffs()
        .iter()
        .map(|c| c.abs() / &lc)
        .fold(Rational::zero(), |a, b| if b > a { b } else { a })
        + Rational::from_integer(1.into());
    let lo = -bound.clone();
    let mut roots = Vec::new();
    let mut stack = vec![(lo.clone(), bound)];
    while let Some((a, b)) = stack.pop() {
        let count = variations_at(&seq, &a) - variations_at(&seq, &b);
        match count {
            0 => {}
            1 => roots.push(refine(p, a, b)),
            _ => {
                let mid = (&a + &b) / Rational::from_integer(2.into());
                stack.push((a, mid.clone()));
                stack.push((mid, b));
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots
}

/// The single root in `(a, b]`.
fn refine(p: &OperatorPoly, mut a: Rational, mut b: Rational) -> f64 {
    if p.eval(&b).is_zero() {
        return to_f64(&b);
    }
    let two = Rational::from_integer(2.into());
    let sb = p.eval(&b).is_positive();
    for _ in 0..80 {
        let mid = (&a + &b) / &two;
        let v = p.eval(&mid);
        if v.is_zero() {
            return to_f64(&mid);
        }
        if v.is_positive() == sb {
            b = mid;
        } else {
            a = mid;
        }
    }
    to_f64(&((a + b) / two))
}

/// Physicists' Hermite polynomials `H_0(x) ..= H_n(x)`.
pub fn hermite_all(n: usize, x: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(n + 1);
    h.push(1.0);
    if n >= 1 {
        h.push(2.0 * x);
    }
    for k in 1..n {
        h.push(2.0 * x * h[k] - 2.0 * k as f64 * h[k - 1]);
    }
    h
}

/// Squared-exponential hyperparameters, stored in log space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparameters {
    pub log_sigma_f: f64,
    pub log_lengthscale: f64,
}

impl Hyperparameters {
    pub fn new(sigma_f: f64, lengthscale: f64) -> Result<Self> {
        if !(sigma_f > 0.0 && lengthscale > 0.0 && sigma_f.is_finite() && lengthscale.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "hyperparameters must be positive: sigma_f={sigma_f}, lengthscale={lengthscale}"
            )));
        }
        Ok(Hyperparameters {
            log_sigma_f: sigma_f.ln(),
            log_lengthscale: lengthscale.ln(),
        })
    }

    pub fn from_log(log_sigma_f: f64, log_lengthscale: f64) -> Self {
        Hyperparameters {
            log_sigma_f,
            log_lengthscale,
        }
    }

    pub fn sigma_f(&self) -> f64 {
        self.log_sigma_f.exp()
    }

    pub fn signal_variance(&self) -> f64 {
        (2.0 * self.log_sigma_f).exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }
}

/// `d^a/dt^a d^b/dt'^b k_SE(t, t')`.
pub fn se_mixed_derivative(a: usize, b: usize, t: f64, t2: f64, hyper: &Hyperparameters) -> f64 {
    let s = 1.0 / (hyper.lengthscale() * std::f64::consts::SQRT_2);
    let x = s * (t - t2);
    let n = a + b;
    let k = hyper.signal_variance() * (-x * x).exp();
    let sign = if b.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * (-s).powi(n as i32) * hermite_all(n, x)[n] * k
}

/// Linear dynamics `x' = A x + B u` kept for residual diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Per output pair `(i, j)`, the weights `w[n]` of the `n`-th derivative of
/// the shared SE kernel summed over all SE latent dimensions.
#[derive(Clone, Debug)]
struct SeWeights {
    max_order: usize,
    // row-major over (i, j), each of length max_order + 1
    w: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct SolutionColumn {
    roots: Vec<f64>,
    // per output i, float coefficients of V[i][m]
    coeffs: Vec<Vec<f64>>,
}

/// GP prior over stacked `[x; u]` whose realizations solve the linearized
/// ODE, shifted to the operating point `[x_e; u_e]`.
#[derive(Clone, Debug)]
pub struct LodeGpModel {
    v: OperatorMatrix,
    latent: LatentKernelSpec,
    pub hyper: Hyperparameters,
    mean_shift: DVector<f64>,
    state_dim: usize,
    control_dim: usize,
    dynamics: Option<LinearDynamics>,
    se: SeWeights,
    solutions: Vec<SolutionColumn>,
}

impl LodeGpModel {
    pub fn new(
        v: OperatorMatrix,
        latent: LatentKernelSpec,
        hyper: Hyperparameters,
        mean_shift: DVector<f64>,
        state_dim: usize,
        control_dim: usize,
    ) -> Result<Self> {
        let dz = v.cols();
        if v.rows() != dz || latent.dims() != dz || mean_shift.len() != dz || state_dim + control_dim != dz {
            return Err(Error::Shape(format!(
                "V is {}x{}, {} latent dims, mean of length {}, d_x + d_u = {}",
                v.rows(),
                v.cols(),
                latent.dims(),
                mean_shift.len(),
                state_dim + control_dim
            )));
        }
        let vf = v.to_f64_coeffs();

        let max_deg = (0..dz)
            .filter(|&m| latent.0[m] == LatentKernel::Se)
            .flat_map(|m| (0..dz).map(move |i| (i, m)))
            .map(|(i, m)| vf[i][m].len().saturating_sub(1))
            .max()
            .unwrap_or(0);
        let max_order = 2 * max_deg;
        let mut w = vec![vec![0.0; max_order + 1]; dz * dz];
        let mut solutions = Vec::new();
        for (m, kernel) in latent.0.iter().enumerate() {
            match kernel {
                LatentKernel::Zero => {}
                LatentKernel::Se => {
                    for i in 0..dz {
                        for j in 0..dz {
                            let wij = &mut w[i * dz + j];
                            for (a, ca) in vf[i][m].iter().enumerate() {
                                for (b, cb) in vf[j][m].iter().enumerate() {
                                    let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
                                    wij[a + b] += sign * ca * cb;
                                }
                            }
                        }
                    }
                }
                LatentKernel::Solution(roots) => solutions.push(SolutionColumn {
                    roots: roots.clone(),
                    coeffs: (0..dz).map(|i| vf[i][m].clone()).collect(),
                }),
            }
        }

        Ok(LodeGpModel {
            v,
            latent,
            hyper,
            mean_shift,
            state_dim,
            control_dim,
            dynamics: None,
            se: SeWeights { max_order, w },
            solutions,
        })
    }

    /// Builds `H`, its Smith form and the latent kernels for a linearization;
    /// the prior mean is the operating point.
    pub fn from_linearization(
        lin: &LinearizedSystem,
        hyper: Hyperparameters,
    ) -> Result<(Self, SmithDecomposition)> {
        let h = lin.operator_matrix()?;
        let snf = smith_normal_form(&h)?;
        let latent = construct_latent_kernel(&snf.d)?;
        let mut model = Self::new(
            snf.v.clone(),
            latent,
            hyper,
            lin.operating_point(),
            lin.state_dim(),
            lin.control_dim(),
        )?;
        model.dynamics = Some(LinearDynamics {
            a: lin.a_e.clone(),
            b: lin.b_e.clone(),
        });
        Ok((model, snf))
    }

    /// Independent SE outputs with identity pushforward and zero mean.
    pub fn independent_se(dims: usize, hyper: Hyperparameters) -> Self {
        Self::new(
            OperatorMatrix::identity(dims),
            LatentKernelSpec(vec![LatentKernel::Se; dims]),
            hyper,
            DVector::zeros(dims),
            dims,
            0,
        )
        .expect("consistent shapes")
    }

    pub fn with_hyper(&self, hyper: Hyperparameters) -> Self {
        LodeGpModel {
            hyper,
            ..self.clone()
        }
    }

    pub fn with_mean_shift(&self, mean_shift: DVector<f64>) -> Result<Self> {
        if mean_shift.len() != self.output_dim() {
            return Err(Error::Shape("mean shift length".into()));
        }
        Ok(LodeGpModel {
            mean_shift,
            ..self.clone()
        })
    }

    pub fn with_dynamics(mut self, dynamics: LinearDynamics) -> Self {
        self.dynamics = Some(dynamics);
        self
    }

    pub fn output_dim(&self) -> usize {
        self.mean_shift.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn v(&self) -> &OperatorMatrix {
        &self.v
    }

    pub fn latent(&self) -> &LatentKernelSpec {
        &self.latent
    }

    pub fn dynamics(&self) -> Option<&LinearDynamics> {
        self.dynamics.as_ref()
    }

    pub fn mean_shift(&self) -> &DVector<f64> {
        &self.mean_shift
    }

    /// The prior mean is the constant operating point.
    pub fn prior_mean(&self, _t: f64) -> DVector<f64> {
        self.mean_shift.clone()
    }

    pub fn covariance(&self, t: f64, t2: f64) -> DMatrix<f64> {
        let dz = self.output_dim();
        let mut out = DMatrix::zeros(dz, dz);
        self.accumulate(t, t2, &mut out, None);
        out
    }

    /// Covariance and its derivatives with respect to `log sigma_f` and
    /// `log lengthscale`.
    pub fn covariance_with_gradient(
        &self,
        t: f64,
        t2: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let dz = self.output_dim();
        let mut k = DMatrix::zeros(dz, dz);
        let mut dsig = DMatrix::zeros(dz, dz);
        let mut dell = DMatrix::zeros(dz, dz);
        self.accumulate(t, t2, &mut k, Some((&mut dsig, &mut dell)));
        (k, dsig, dell)
    }

    fn accumulate(
        &self,
        t: f64,
        t2: f64,
        out: &mut DMatrix<f64>,
        grad: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>,
    ) {
        let dz = self.output_dim();
        if self.latent.se_count() > 0 {
            let n_max = self.se.max_order;
            let s = 1.0 / (self.hyper.lengthscale() * std::f64::consts::SQRT_2);
            let x = s * (t - t2);
            let k = self.hyper.signal_variance() * (-x * x).exp();
            let h = hermite_all(n_max, x);
            // g_n = (-s)^n H_n(x) k
            let mut pow = 1.0;
            let mut g = Vec::with_capacity(n_max + 1);
            let mut dg = Vec::with_capacity(n_max + 1);
            for n in 0..=n_max {
                g.push(pow * h[n] * k);
                // d g_n / d log(lengthscale) = -(-s)^n k [n H_n + 2n x H_{n-1} - 2 x^2 H_n]
                let hm1 = if n > 0 { h[n - 1] } else { 0.0 };
                let nf = n as f64;
                dg.push(-pow * k * (nf * h[n] + 2.0 * nf * x * hm1 - 2.0 * x * x * h[n]));
                pow *= -s;
            }
            let dot = |w: &[f64], v: &[f64]| w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            match grad {
                Some((dsig, dell)) => {
                    for i in 0..dz {
                        for j in 0..dz {
                            let w = &self.se.w[i * dz + j];
                            let val = dot(w, &g);
                            out[(i, j)] += val;
                            dsig[(i, j)] += 2.0 * val;
                            dell[(i, j)] += dot(w, &dg);
                        }
                    }
                }
                None => {
                    for i in 0..dz {
                        for j in 0..dz {
                            out[(i, j)] += dot(&self.se.w[i * dz + j], &g);
                        }
                    }
                }
            }
        }
        for col in &self.solutions {
            for &r in &col.roots {
                let apply = |c: &[f64], at: f64| {
                    let mut rp = 1.0;
                    let mut acc = 0.0;
                    for ci in c {
                        acc += ci * rp;
                        rp *= r;
                    }
                    acc * (r * at).exp()
                };
                let left: Vec<f64> = col.coeffs.iter().map(|c| apply(c, t)).collect();
                let right: Vec<f64> = col.coeffs.iter().map(|c| apply(c, t2)).collect();
                for i in 0..dz {
                    for j in 0..dz {
                        out[(i, j)] += left[i] * right[j];
                    }
                }
            }
        }
    }
}

/// Largest `|dx/dt - A dx - B du|` over the interior of `grid`, with the
/// derivative taken by central differences of `trajectory`.
pub fn ode_residual(
    model: &LodeGpModel,
    trajectory: impl Fn(f64) -> DVector<f64>,
    grid: &[f64],
) -> Result<f64> {
    if grid.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "residual needs at least 3 grid points, got {}",
            grid.len()
        )));
    }
    let dyn_ = model
        .dynamics()
        .ok_or_else(|| Error::InvalidArgument("model carries no linear dynamics".into()))?;
    let nx = model.state_dim();
    let shift = model.mean_shift();
    let values: Vec<DVector<f64>> = grid.iter().map(|&t| trajectory(t) - shift).collect();
    let mut worst = 0.0f64;
    for k in 1..grid.len() - 1 {
        let dt = grid[k + 1] - grid[k - 1];
        let dz = (&values[k + 1] - &values[k - 1]) / dt;
        let dx = values[k].rows(0, nx);
        let du = values[k].rows(nx, model.control_dim());
        let res = dz.rows(0, nx) - &dyn_.a * dx - &dyn_.b * du;
        worst = worst.max(res.amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::rational::rat_int;

    fn hyp(sf: f64, l: f64) -> Hyperparameters {
        Hyperparameters::new(sf, l).unwrap()
    }

    fn diag(entries: Vec<OperatorPoly>, cols: usize) -> OperatorMatrix {
        let n = entries.len();
        let mut d = OperatorMatrix::zeros(n, cols);
        for (i, e) in entries.into_iter().enumerate() {
            d[(i, i)] = e;
        }
        d
    }

    #[test]
    fn latent_classification() {
        let d = diag(vec![OperatorPoly::one(), OperatorPoly::one()], 3);
        let spec = construct_latent_kernel(&d).unwrap();
        assert_eq!(
            spec.0,
            vec![LatentKernel::Zero, LatentKernel::Zero, LatentKernel::Se]
        );
        let spec = construct_latent_kernel(&diag(vec![OperatorPoly::one()], 1)).unwrap();
        assert_eq!(spec.0, vec![LatentKernel::Zero]);
    }

    // rational root theorem on a monic integer polynomial
    fn integer_roots(c: &[i64]) -> Vec<f64> {
        let zeros = c.iter().take_while(|&&ci| ci == 0).count();
        let c = &c[zeros..];
        let c0 = c[0].abs();
        let mut out = vec![0.0; zeros];
        for d in 1..=c0 {
            if c0 % d == 0 {
                for cand in [-d, d] {
                    let v = c.iter().rev().fold(0i64, |acc, &ci| acc * cand + ci);
                    if v == 0 {
                        out.push(cand as f64);
                    }
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    #[test]
    fn solution_roots_match_rational_root_oracle() {
        for c in [vec![2, -3, 1], vec![-6, 11, -6, 1], vec![6, 1, -4, 1], vec![0, -4, 0, 1]] {
            let p = OperatorPoly::from_i64(&c);
            let spec = construct_latent_kernel(&diag(vec![p], 1)).unwrap();
            let LatentKernel::Solution(roots) = &spec.0[0] else {
                panic!("expected solution kernel");
            };
            let want = integer_roots(&c);
            assert_eq!(roots.len(), want.len(), "{c:?}");
            for (g, w) in roots.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{c:?}: {roots:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn irrational_roots_are_refined() {
        // dt^2 - 2
        let p = OperatorPoly::new(vec![rat_int(-2), rat_int(0), rat_int(1)]);
        let spec = construct_latent_kernel(&diag(vec![p], 1)).unwrap();
        let LatentKernel::Solution(roots) = &spec.0[0] else {
            panic!()
        };
        assert!((roots[0] + 2f64.sqrt()).abs() < 1e-14);
        assert!((roots[1] - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn repeated_and_complex_roots_are_rejected() {
        let rep = OperatorPoly::from_i64(&[1, 2, 1]);
        let err = construct_latent_kernel(&diag(vec![rep], 1)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLatent { reason: "repeated roots", .. }));
        let cplx = OperatorPoly::from_i64(&[1, 0, 1]);
        let err = construct_latent_kernel(&diag(vec![OperatorPoly::one(), cplx], 2)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLatent { index: 1, reason: "complex roots", .. }));
    }

    #[test]
    fn hermite_values() {
        let h = hermite_all(4, 0.5);
        assert_eq!(h, vec![1.0, 1.0, -1.0, -5.0, 1.0]);
    }

    #[test]
    fn se_derivative_cases() {
        let h = hyp(1.3, 2.0);
        let k = se_mixed_derivative(0, 0, 1.0, 2.5, &h);
        assert!((k - 1.69 * (-(1.5f64.powi(2)) / 8.0).exp()).abs() < 1e-15);
        assert_eq!(se_mixed_derivative(1, 0, 0.7, 0.7, &h), 0.0);
        let v = se_mixed_derivative(1, 1, 0.3, 0.3, &hyp(1.0, 1.0));
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn se_derivative_matches_finite_differences() {
        let h = hyp(0.8, 1.7);
        let eps = 1e-5;
        for n in 1..=6usize {
            for a in 0..=n {
                let b = n - a;
                for k in 0..20 {
                    let r = -5.0 * 1.7 + k as f64 * 0.5;
                    let fd = if a > 0 {
                        (se_mixed_derivative(a - 1, b, r + eps, 0.0, &h)
                            - se_mixed_derivative(a - 1, b, r - eps, 0.0, &h))
                            / (2.0 * eps)
                    } else {
                        (se_mixed_derivative(a, b - 1, r, eps, &h)
                            - se_mixed_derivative(a, b - 1, r, -eps, &h))
                            / (2.0 * eps)
                    };
                    let got = se_mixed_derivative(a, b, r, 0.0, &h);
                    assert!((got - fd).abs() <= 1e-5 * got.abs().max(1e-3), "a={a} b={b} r={r}");
                }
            }
        }
    }

    #[test]
    fn identity_pushforward_is_block_diagonal() {
        let h = hyp(1.5, 0.7);
        let m = LodeGpModel::independent_se(3, h);
        let k = m.covariance(0.2, 1.1);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { se_mixed_derivative(0, 0, 0.2, 1.1, &h) } else { 0.0 };
                assert!((k[(i, j)] - want).abs() < 1e-15);
            }
        }
        assert_eq!(m.prior_mean(3.0), DVector::zeros(3));
    }

    #[test]
    fn derivative_pushforward() {
        // V = [[1], [dt]]-like column: outputs (h, h')
        let mut v = OperatorMatrix::identity(2);
        v[(1, 0)] = OperatorPoly::dt();
        let spec = LatentKernelSpec(vec![LatentKernel::Se, LatentKernel::Zero]);
        let h = hyp(1.0, 1.3);
        let m = LodeGpModel::new(v, spec, h, DVector::zeros(2), 1, 1).unwrap();
        let (t, t2) = (0.4, -0.9);
        let k = m.covariance(t, t2);
        assert!((k[(0, 0)] - se_mixed_derivative(0, 0, t, t2, &h)).abs() < 1e-14);
        assert!((k[(0, 1)] - se_mixed_derivative(0, 1, t, t2, &h)).abs() < 1e-14);
        assert!((k[(1, 0)] - se_mixed_derivative(1, 0, t, t2, &h)).abs() < 1e-14);
        assert!((k[(1, 1)] - se_mixed_derivative(1, 1, t, t2, &h)).abs() < 1e-14);
    }

    #[test]
    fn solution_kernel_covariance() {
        let p = OperatorPoly::from_i64(&[2, -3, 1]);
        let spec = construct_latent_kernel(&diag(vec![p], 1)).unwrap();
        let m = LodeGpModel::new(
            OperatorMatrix::identity(1),
            spec,
            hyp(1.0, 1.0),
            DVector::zeros(1),
            1,
            0,
        )
        .unwrap();
        let (t, t2) = (0.3f64, -0.2f64);
        let want = (t + t2).exp() + (2.0 * (t + t2)).exp();
        assert!((m.covariance(t, t2)[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn covariance_gradient_matches_differences() {
        let mut v = OperatorMatrix::identity(2);
        v[(1, 0)] = OperatorPoly::from_i64(&[1, 2, 3]);
        let spec = LatentKernelSpec(vec![LatentKernel::Se, LatentKernel::Zero]);
        let base = LodeGpModel::new(v, spec, hyp(0.7, 2.1), DVector::zeros(2), 1, 1).unwrap();
        let (_, dsig, dell) = base.covariance_with_gradient(0.5, 2.0);
        let eps = 1e-6;
        let hp = base.hyper;
        let at = |ls: f64, ll: f64| {
            base.with_hyper(Hyperparameters::from_log(ls, ll))
                .covariance(0.5, 2.0)
        };
        let fd_sig = (at(hp.log_sigma_f + eps, hp.log_lengthscale)
            - at(hp.log_sigma_f - eps, hp.log_lengthscale))
            / (2.0 * eps);
        let fd_ell = (at(hp.log_sigma_f, hp.log_lengthscale + eps)
            - at(hp.log_sigma_f, hp.log_lengthscale - eps))
            / (2.0 * eps);
        assert!((dsig - fd_sig).amax() < 1e-7);
        assert!((dell - fd_ell).amax() < 1e-7);
    }

    #[test]
    fn residual_needs_three_points() {
        let m = LodeGpModel::independent_se(1, hyp(1.0, 1.0)).with_dynamics(LinearDynamics {
            a: DMatrix::from_element(1, 1, -1.0),
            b: DMatrix::zeros(1, 0),
        });
        assert!(ode_residual(&m, |_| DVector::zeros(1), &[0.0, 1.0]).is_err());
        // x = exp(-t) solves x' = -x
        let grid: Vec<f64> = (0..101).map(|k| k as f64 * 0.01).collect();
        let r = ode_residual(&m, |t| DVector::from_element(1, (-t).exp()), &grid).unwrap();
        assert!(r < 1e-4);
    }
}
