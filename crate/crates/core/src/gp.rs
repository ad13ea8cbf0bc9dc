//! Exact multi-output GP inference with per-point, per-dimension noise.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::lodegp::{Hyperparameters, LodeGpModel};

/// Noise floor applied to every diagonal entry of the Gram matrix.
pub const JITTER: f64 = 1e-8;
/// Largest floor tried before giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint {
    pub t: f64,
    pub z: DVector<f64>,
    pub noise_var: DVector<f64>,
}

impl DataPoint {
    pub fn new(t: f64, z: DVector<f64>, noise_var: DVector<f64>) -> Result<Self> {
        if z.len() != noise_var.len() {
            return Err(Error::Shape(format!(
                "observation has {} entries but {} noise variances",
                z.len(),
                noise_var.len()
            )));
        }
        if noise_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "noise variances must be nonnegative: {noise_var:?}"
            )));
        }
        Ok(DataPoint { t, z, noise_var })
    }
}

/// Observations sorted by time; equal times keep insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    points: Vec<DataPoint>,
}

impl Dataset {
    pub fn new(mut points: Vec<DataPoint>) -> Self {
        points.sort_by(|a, b| a.t.total_cmp(&b.t));
        Dataset { points }
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn union(mut self, other: Dataset) -> Dataset {
        self.points.extend(other.points);
        Dataset::new(self.points)
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    /// Every time moved by `dt`.
    pub fn shifted(&self, dt: f64) -> Dataset {
        Dataset {
            points: self
                .points
                .iter()
                .map(|p| DataPoint {
                    t: p.t + dt,
                    ..p.clone()
                })
                .collect(),
        }
    }

    fn check_dims(&self, dz: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if let Some(p) = self.points.iter().find(|p| p.z.len() != dz) {
            return Err(Error::Shape(format!(
                "observation at t={} has {} entries, model has {dz} outputs",
                p.t,
                p.z.len()
            )));
        }
        Ok(())
    }
}

fn prior_gram(model: &LodeGpModel, data: &Dataset) -> DMatrix<f64> {
    let dz = model.output_dim();
    let n = data.len();
    let mut k = DMatrix::zeros(n * dz, n * dz);
    for (i, pi) in data.points.iter().enumerate() {
        for (j, pj) in data.points.iter().enumerate().skip(i) {
            let block = model.covariance(pi.t, pj.t);
            k.view_mut((i * dz, j * dz), (dz, dz)).copy_from(&block);
            if i != j {
                k.view_mut((j * dz, i * dz), (dz, dz)).copy_from(&block.transpose());
            }
        }
    }
    k
}

fn add_noise(k: &mut DMatrix<f64>, data: &Dataset, floor: f64) {
    let dz = data.points.first().map_or(0, |p| p.z.len());
    for (i, p) in data.points.iter().enumerate() {
        for d in 0..dz {
            k[(i * dz + d, i * dz + d)] += p.noise_var[d].max(floor);
        }
    }
}

/// Block Gram matrix of the data plus diagonal noise, each variance lifted to
/// at least [`JITTER`].
pub fn build_gram(model: &LodeGpModel, data: &Dataset) -> Result<DMatrix<f64>> {
    data.check_dims(model.output_dim())?;
    let mut k = prior_gram(model, data);
    add_noise(&mut k, data, JITTER);
    Ok(k)
}

fn residuals(model: &LodeGpModel, data: &Dataset) -> DVector<f64> {
    let dz = model.output_dim();
    let mut r = DVector::zeros(data.len() * dz);
    for (i, p) in data.points.iter().enumerate() {
        r.rows_mut(i * dz, dz).copy_from(&(&p.z - model.prior_mean(p.t)));
    }
    r
}

struct Factorized {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

/// Factorizes with the noise floor raised tenfold on each failure.
fn factorize(model: &LodeGpModel, data: &Dataset) -> Result<Factorized> {
    data.check_dims(model.output_dim())?;
    let base = prior_gram(model, data);
    let mut jitter = JITTER;
    loop {
        let mut k = base.clone();
        add_noise(&mut k, data, jitter);
        if let Some(chol) = k.cholesky() {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(Factorized { chol, jitter });
            }
        }
        if jitter >= MAX_JITTER * (1.0 - 1e-12) {
            return Err(Error::IllConditioned { jitter });
        }
        jitter *= 10.0;
        log::debug!("gram factorization failed, raising jitter to {jitter:e}");
    }
}

/// Conditioned GP. Borrows the model it was built from.
pub struct Posterior<'m> {
    model: &'m LodeGpModel,
    times: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

pub fn condition<'m>(model: &'m LodeGpModel, data: &Dataset) -> Result<Posterior<'m>> {
    let f = factorize(model, data)?;
    let alpha = f.chol.solve(&residuals(model, data));
    Ok(Posterior {
        model,
        times: data.times(),
        chol: f.chol,
        alpha,
        jitter: f.jitter,
    })
}

impl<'m> Posterior<'m> {
    pub fn model(&self) -> &LodeGpModel {
        self.model
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Noise floor the factorization ended up using.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn cross(&self, t_star: f64) -> DMatrix<f64> {
        let dz = self.model.output_dim();
        let mut ks = DMatrix::zeros(self.times.len() * dz, dz);
        for (i, &ti) in self.times.iter().enumerate() {
            ks.view_mut((i * dz, 0), (dz, dz))
                .copy_from(&self.model.covariance(ti, t_star));
        }
        ks
    }

    pub fn mean(&self, t_star: f64) -> DVector<f64> {
        let dz = self.model.output_dim();
        let mut mu = self.model.prior_mean(t_star);
        for (i, &ti) in self.times.iter().enumerate() {
            let block = self.model.covariance(t_star, ti);
            mu += block * self.alpha.rows(i * dz, dz);
        }
        mu
    }

    /// Posterior mean minus the prior mean.
    pub fn mean_deviation(&self, t_star: f64) -> DVector<f64> {
        let dz = self.model.output_dim();
        let mut mu = DVector::zeros(dz);
        for (i, &ti) in self.times.iter().enumerate() {
            mu += self.model.covariance(t_star, ti) * self.alpha.rows(i * dz, dz);
        }
        mu
    }

    pub fn cov(&self, t1: f64, t2: f64) -> DMatrix<f64> {
        let k1 = self.cross(t1);
        let k2 = self.cross(t2);
        self.model.covariance(t1, t2) - k1.transpose() * self.chol.solve(&k2)
    }
}

pub fn posterior_mean(post: &Posterior<'_>, t_star: f64) -> DVector<f64> {
    post.mean(t_star)
}

pub fn posterior_cov(post: &Posterior<'_>, t1: f64, t2: f64) -> DMatrix<f64> {
    post.cov(t1, t2)
}

/// `-1/2 r^T K^-1 r - 1/2 log det K` with residuals against the prior mean;
/// the `2 pi` constant is left out.
pub fn log_marginal_likelihood(model: &LodeGpModel, data: &Dataset) -> Result<f64> {
    let f = factorize(model, data)?;
    let r = residuals(model, data);
    let alpha = f.chol.solve(&r);
    let log_det: f64 = f.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    Ok(-0.5 * r.dot(&alpha) - log_det)
}

/// Gradient of [`log_marginal_likelihood`] with respect to
/// `(log sigma_f, log lengthscale)`.
pub fn log_marginal_likelihood_gradient(model: &LodeGpModel, data: &Dataset) -> Result<[f64; 2]> {
    let f = factorize(model, data)?;
    let r = residuals(model, data);
    let alpha = f.chol.solve(&r);
    let dz = model.output_dim();
    let n = data.len() * dz;
    let mut dsig = DMatrix::zeros(n, n);
    let mut dell = DMatrix::zeros(n, n);
    for (i, pi) in data.points.iter().enumerate() {
        for (j, pj) in data.points.iter().enumerate() {
            let (_, ds, dl) = model.covariance_with_gradient(pi.t, pj.t);
            dsig.view_mut((i * dz, j * dz), (dz, dz)).copy_from(&ds);
            dell.view_mut((i * dz, j * dz), (dz, dz)).copy_from(&dl);
        }
    }
    let kinv = f.chol.inverse();
    let inner = &alpha * alpha.transpose() - kinv;
    // 1/2 tr(inner * dK); both symmetric, so an elementwise product suffices
    let g = |dk: &DMatrix<f64>| 0.5 * inner.component_mul(dk).sum();
    Ok([g(&dsig), g(&dell)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub sigma_f_range: (f64, f64),
    pub lengthscale_range: (f64, f64),
    pub grid_points: usize,
    pub max_iter: usize,
    /// simplex size (log units) below which refinement stops
    pub x_tol: f64,
    pub f_tol: f64,
    /// keep the simplex search inside the seed box
    pub bounded: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            sigma_f_range: (1e-3, 1e1),
            lengthscale_range: (0.1, 100.0),
            grid_points: 5,
            max_iter: 400,
            x_tol: 1e-6,
            f_tol: 1e-10,
            bounded: true,
        }
    }
}

fn log_grid(range: (f64, f64), n: usize) -> Vec<f64> {
    let (lo, hi) = (range.0.ln(), range.1.ln());
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationReport {
    pub hyper: Hyperparameters,
    pub mll: f64,
    pub best_seed: Hyperparameters,
    pub best_seed_mll: f64,
    pub iterations: usize,
}

/// Maximizes the marginal likelihood over `(log sigma_f, log lengthscale)`:
/// a log-spaced grid of seeds, then Nelder-Mead from the best seed.
pub fn optimize_hyperparameters(
    model: &LodeGpModel,
    data: &Dataset,
    config: &OptimizerConfig,
) -> Result<Hyperparameters> {
    optimize_hyperparameters_report(model, data, config).map(|r| r.hyper)
}

pub fn optimize_hyperparameters_report(
    model: &LodeGpModel,
    data: &Dataset,
    config: &OptimizerConfig,
) -> Result<OptimizationReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let eval = |p: [f64; 2]| -> Option<f64> {
        let m = model.with_hyper(Hyperparameters::from_log(p[0], p[1]));
        log_marginal_likelihood(&m, data).ok().filter(|v| v.is_finite())
    };

    // lexicographic order with strict improvement breaks ties toward the
    // smallest (sigma_f, lengthscale)
    let mut best: Option<([f64; 2], f64)> = None;
    for &ls in &log_grid(config.sigma_f_range, config.grid_points) {
        for &ll in &log_grid(config.lengthscale_range, config.grid_points) {
            if let Some(v) = eval([ls, ll]) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some(([ls, ll], v));
                }
            }
        }
    }
    let (seed, seed_val) = best.ok_or(Error::OptimizationFailed)?;

    let bounds = config.bounded.then(|| {
        [
            (config.sigma_f_range.0.ln(), config.sigma_f_range.1.ln()),
            (config.lengthscale_range.0.ln(), config.lengthscale_range.1.ln()),
        ]
    });
    let objective = |p: [f64; 2]| {
        if let Some(b) = &bounds {
            if p.iter().zip(b).any(|(v, (lo, hi))| *v < *lo || *v > *hi) {
                return f64::INFINITY;
            }
        }
        eval(p).map_or(f64::INFINITY, |v| -v)
    };
    let (x, fx, iterations) = nelder_mead(objective, seed, 0.5, config);
    let (x, mll) = if -fx >= seed_val { (x, -fx) } else { (seed, seed_val) };
    Ok(OptimizationReport {
        hyper: Hyperparameters::from_log(x[0], x[1]),
        mll,
        best_seed: Hyperparameters::from_log(seed[0], seed[1]),
        best_seed_mll: seed_val,
        iterations,
    })
}

/// Plain Nelder-Mead on two variables; returns the best vertex.
fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    step: f64,
    config: &OptimizerConfig,
) -> ([f64; 2], f64, usize) {
    let mut simplex: Vec<([f64; 2], f64)> = [
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ]
    .into_iter()
    .map(|p| (p, f(p)))
    .collect();
    // a step off the box edge is infeasible; mirror it inwards
    for k in 1..3 {
        if !simplex[k].1.is_finite() {
            let mut p = start;
            p[k - 1] -= step;
            simplex[k] = (p, f(p));
        }
    }
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];

    let mut iter = 0;
    while iter < config.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| (p[0] - simplex[0].0[0]).abs().max((p[1] - simplex[0].0[1]).abs()))
            .fold(0.0, f64::max);
        let spread = (simplex[2].1 - simplex[0].1).abs();
        if size < config.x_tol && (spread < config.f_tol || !spread.is_finite()) {
            break;
        }
        if size < config.x_tol * 1e-3 {
            break;
        }
        iter += 1;

        let centroid = lerp(simplex[0].0, simplex[1].0, 0.5);
        let worst = simplex[2];
        let reflected = lerp(centroid, worst.0, -1.0);
        let fr = f(reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(centroid, worst.0, -2.0);
            let fe = f(expanded);
            simplex[2] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[1].1 {
            simplex[2] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < worst.1 {
                let c = lerp(centroid, worst.0, -0.5);
                (c, f(c))
            } else {
                let c = lerp(centroid, worst.0, 0.5);
                (c, f(c))
            };
            if fc < worst.1.min(fr) {
                simplex[2] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let p = lerp(best, v.0, 0.5);
                    *v = (p, f(p));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0, simplex[0].1, iter)
}
