use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use lodegp_mpc::cli::{build_model, run_sweep, ExperimentConfig, ExperimentOutcome, ModelKind};
use lodegp_mpc::gp::{condition, optimize_hyperparameters, Posterior};
use lodegp_mpc::linearize::{linearize, EquilibriumOptions, FnSystem, NonlinearSystem};
use lodegp_mpc::lodegp::{ode_residual, se_mixed_derivative, Hyperparameters, LodeGpModel};
use lodegp_mpc::mpc::{assemble_dataset, ControllerState};
use lodegp_mpc::plant::{rk4_step, simulate_hold, PlantState, TwoTank, TwoTankParams};
use lodegp_mpc::polyalg::{smith_normal_form, OperatorMatrix, OperatorPoly};
use nalgebra::{dvector, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail = format!("{} [{:.2?}, limit {:?}]", o.detail, took, limit);
    o.pass &= took < limit;
    o
}

fn snf_two_tank() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (_, _, reference, _, _) = build_model(&cfg).unwrap();
    let h = reference.operator_matrix().unwrap();
    let snf = smith_normal_form(&h).unwrap();
    let want = OperatorMatrix::from_rows(vec![
        vec![OperatorPoly::one(), OperatorPoly::zero(), OperatorPoly::zero()],
        vec![OperatorPoly::zero(), OperatorPoly::one(), OperatorPoly::zero()],
    ])
    .unwrap();
    let verified = snf.verify(&h);
    outcome(
        snf.d == want && verified.is_ok(),
        format!("D = [[1,0,0],[0,1,0]]: {}, invariants: {:?}", snf.d == want, verified),
    )
}

fn random_poly(rng: &mut ChaCha8Rng) -> OperatorPoly {
    if rng.random_bool(0.3) {
        return OperatorPoly::zero();
    }
    let deg = rng.random_range(0..=2);
    let c: Vec<i64> = (0..=deg).map(|_| rng.random_range(-3..=3)).collect();
    OperatorPoly::from_i64(&c)
}

fn snf_random_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    let mut failures = Vec::new();
    while checked < 100 {
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(1..=6);
        let entries = (0..rows * cols).map(|_| random_poly(&mut rng)).collect();
        let h = OperatorMatrix::from_entries(rows, cols, entries).unwrap();
        if h.is_zero() {
            continue;
        }
        checked += 1;
        match smith_normal_form(&h).map_err(|e| e.to_string()).and_then(|s| s.verify(&h)) {
            Ok(()) => {}
            Err(e) => failures.push(format!("{rows}x{cols}: {e}")),
        }
    }
    outcome(failures.is_empty(), format!("{checked} matrices, failures: {failures:?}"))
}

fn equilibria() -> Outcome {
    let p = TwoTankParams::default();
    let plant = TwoTank::new(p);
    let guess = dvector![0.3, 0.15];
    let mut pass = true;
    let mut detail = Vec::new();
    for (u, lit) in [(4e-5, [0.26095, 0.13048]), (6e-5, [0.58716, 0.29358])] {
        // outflow balance fixes x2, coupling balance then fixes x1 - x2
        let x2 = (u / p.c2r).powi(2) / (2.0 * p.g);
        let x1 = x2 + (u / p.c12).powi(2) / (2.0 * p.g);
        let lin = linearize(&plant, &dvector![u], &guess, EquilibriumOptions { tol: 1e-14, max_iter: 100 }).unwrap();
        let rel = ((lin.x_e[0] - x1) / x1).abs().max(((lin.x_e[1] - x2) / x2).abs());
        let lit_rel = ((lin.x_e[0] - lit[0]) / lit[0]).abs().max(((lin.x_e[1] - lit[1]) / lit[1]).abs());
        let res = plant.rhs(&lin.x_e, &dvector![u]).unwrap().amax();
        pass &= rel < 1e-8 && lit_rel < 5e-5 && res < 1e-12 && lin.asymptotically_stable;
        detail.push(format!(
            "u={u:e}: x=({:.5}, {:.5}) rel {rel:.1e} residual {res:.1e} stable {}",
            lin.x_e[0], lin.x_e[1], lin.asymptotically_stable
        ));
    }
    outcome(pass, detail.join("; "))
}

fn kernel_derivatives() -> Outcome {
    let hyp = Hyperparameters::new(0.7, 1.3).unwrap();
    let l = hyp.lengthscale();
    let t2 = 0.4;
    let h = 1e-3 * l;
    let grid: Vec<f64> = (0..50).map(|i| t2 - 5.0 * l + 10.0 * l * i as f64 / 49.0).collect();
    let mut worst = 0.0f64;
    for a in 0..=6usize {
        for b in 0..=6 - a {
            if a + b == 0 {
                continue;
            }
            // differentiate the next lower order with a five-point stencil
            let lower = |t: f64, s: f64| {
                if a > 0 {
                    se_mixed_derivative(a - 1, b, t, s, &hyp)
                } else {
                    se_mixed_derivative(a, b - 1, t, s, &hyp)
                }
            };
            let shifted = |t: f64, d: f64| if a > 0 { lower(t + d, t2) } else { lower(t, t2 + d) };
            let exact: Vec<f64> = grid.iter().map(|&t| se_mixed_derivative(a, b, t, t2, &hyp)).collect();
            let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (&t, &e) in grid.iter().zip(&exact) {
                let fd = (-shifted(t, 2.0 * h) + 8.0 * shifted(t, h) - 8.0 * shifted(t, -h) + shifted(t, -2.0 * h))
                    / (12.0 * h);
                worst = worst.max((fd - e).abs() / scale);
            }
        }
    }
    outcome(worst < 1e-5, format!("max error relative to the grid sup norm {worst:.2e}"))
}

struct Conditioned {
    model: LodeGpModel,
    data_times: Vec<f64>,
    x0: DVector<f64>,
    u0: DVector<f64>,
    z_ref: DVector<f64>,
}

fn model_b() -> Conditioned {
    let cfg = ExperimentConfig::default().with_model(ModelKind::B);
    let (_, start, reference, model, _) = build_model(&cfg).unwrap();
    let z_ref = reference.operating_point();
    let state = ControllerState::new(model.clone(), cfg.mpc_config(z_ref.clone()), 0.0, start.u_e.clone()).unwrap();
    let data = assemble_dataset(&state, &start.x_e).unwrap();
    let hyper = optimize_hyperparameters(&model, &data, &cfg.optimizer.to_config()).unwrap();
    Conditioned {
        model: model.with_hyper(hyper),
        data_times: data.times(),
        x0: start.x_e,
        u0: start.u_e,
        z_ref,
    }
}

fn with_posterior<T>(c: &Conditioned, f: impl FnOnce(&Posterior<'_>) -> T) -> T {
    let cfg = ExperimentConfig::default().with_model(ModelKind::B);
    let state = ControllerState::new(c.model.clone(), cfg.mpc_config(c.z_ref.clone()), 0.0, c.u0.clone()).unwrap();
    let data = assemble_dataset(&state, &c.x0).unwrap();
    f(&condition(&c.model, &data).unwrap())
}

fn ode_constraint() -> Outcome {
    let c = model_b();
    with_posterior(&c, |post| {
        let residual = |h: f64| {
            let grid: Vec<f64> = (0..=20).map(|k| 2.0 + k as f64 * h).collect();
            ode_residual(post.model(), |t| post.mean(t), &grid).unwrap()
        };
        let steps = [0.4, 0.2, 0.1];
        let r: Vec<f64> = steps.iter().map(|&h| residual(h)).collect();
        let shown: Vec<String> = r.iter().map(|v| format!("{v:.2e}")).collect();
        let order = ((r[0] / r[1]).log2()).min((r[1] / r[2]).log2());
        let fine = residual(1e-4);
        let dyn_ = post.model().dynamics().unwrap();
        let max_rate = (0..=100)
            .map(|k| {
                let z = post.mean(k as f64 * 0.1) - post.model().mean_shift();
                let nx = post.model().state_dim();
                (&dyn_.a * z.rows(0, nx) + &dyn_.b * z.rows(nx, z.len() - nx)).amax()
            })
            .fold(0.0f64, f64::max);
        outcome(
            order >= 1.9 && fine <= 1e-6 * max_rate,
            format!(
                "residuals {shown:?} at steps {steps:?}, order {order:.2}; at 1e-4: {fine:.2e} vs 1e-6*max|dx/dt| = {:.2e}",
                1e-6 * max_rate
            ),
        )
    })
}

fn interpolation() -> Outcome {
    let c = model_b();
    with_posterior(&c, |post| {
        let mu = post.mean(0.0);
        let want = DVector::from_iterator(3, c.x0.iter().chain(c.u0.iter()).copied());
        let err = (&mu - &want).amax();
        let tol = 1e-4 * want.amax().max(1.0);
        outcome(err < tol, format!("|mu(0) - [x0; u0]| = {err:.2e}"))
    })
}

fn reversion() -> Outcome {
    let c = model_b();
    with_posterior(&c, |post| {
        let hyp = post.model().hyper;
        let t = c.data_times.iter().fold(f64::MIN, |m, &v| m.max(v)) + 10.0 * hyp.lengthscale();
        let dev = (post.mean(t) - post.model().prior_mean(t)).amax();
        outcome(
            dev < 1e-6 * hyp.sigma_f(),
            format!("t = {t}: deviation {dev:.2e} vs 1e-6*sigma_f = {:.2e}", 1e-6 * hyp.sigma_f()),
        )
    })
}

fn closed_loop(runs: &[ExperimentOutcome]) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for r in runs {
        let x_ref = &r.reference.x_e;
        let d200 = (r.trace.state_at(200.0).unwrap() - x_ref).amax();
        pass &= d200 < 1e-2;
        detail.push(format!("{}: |x(200) - x_ref| = {d200:.2e}", r.metrics.model.name()));
        if r.metrics.model == ModelKind::B {
            let d100 = (r.trace.state_at(100.0).unwrap() - x_ref).amax();
            pass &= d100 < 2e-2;
            detail.push(format!("B: |x(100) - x_ref| = {d100:.2e}"));
        }
    }
    outcome(pass, detail.join(", "))
}

fn table_shape(runs: &[ExperimentOutcome]) -> Outcome {
    let [a, b, c] = [&runs[0].metrics, &runs[1].metrics, &runs[2].metrics];
    let ordering = a.control_error > b.control_error && b.control_error > c.control_error;
    let range = (5e-4..=5e-2).contains(&a.control_error);
    let hard = a.constraint_violation == 0.0 && b.constraint_violation == 0.0;
    let soft = c.constraint_violation > 0.0 && c.constraint_violation < 1e-2;
    outcome(
        ordering && range && hard && soft,
        format!(
            "control error A {:.2e} B {:.2e} C {:.2e} (ordering {ordering}, A in range {range}); violation A {:.2e} B {:.2e} C {:.2e} (A = B = 0 {hard}, C small positive {soft})",
            a.control_error, b.control_error, c.control_error, a.constraint_violation, b.constraint_violation, c.constraint_violation
        ),
    )
}

fn integrator() -> Outcome {
    let decay = FnSystem::new(1, 1, |x, _| dvector![-x[0]]);
    let err = |h: f64| {
        let n = (1.0 / h).round() as usize;
        let mut x = dvector![1.0];
        for _ in 0..n {
            x = rk4_step(&decay, &x, &dvector![0.0], h).unwrap().0;
        }
        (x[0] - (-1.0f64).exp()).abs()
    };
    let order = (err(0.1) / err(0.05)).log2().min((err(0.05) / err(0.025)).log2());
    let p = TwoTankParams::default();
    let u = 0.3 * p.u1_max;
    let x2 = (u / p.c2r).powi(2) / (2.0 * p.g);
    let x1 = x2 + (u / p.c12).powi(2) / (2.0 * p.g);
    let x_e = dvector![x1, x2];
    let end = simulate_hold(&TwoTank::new(p), &PlantState { x: x_e.clone(), t: 0.0 }, &dvector![u], 200.0, 0.01).unwrap();
    let drift = (&end.state.x - &x_e).amax();
    outcome(order >= 3.8 && drift < 1e-9, format!("order {order:.3}, drift over 200 s {drift:.2e}"))
}

fn sweep_once(out: &Path) -> Result<Vec<u8>, String> {
    let run = Command::new(env!("CARGO_BIN_EXE_lodegp-mpc"))
        .args(["--sweep", "--out"])
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    if !run.status.success() {
        return Err(format!("exit status {}", run.status));
    }
    std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let first = sweep_once(&dir.path().join("first"));
    let second = sweep_once(&dir.path().join("second"));
    match (first, second) {
        (Ok(a), Ok(b)) => outcome(a == b && !a.is_empty(), format!("metrics.csv identical: {} ({} bytes)", a == b, a.len())),
        (a, b) => outcome(false, format!("sweep failed: {:?} {:?}", a.err(), b.err())),
    }
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut results = vec![
        (1, "smith form of the two-tank linearization", timed(secs(1), snf_two_tank)),
        (2, "smith form property suite", timed(secs(30), snf_random_suite)),
        (3, "equilibria", timed(secs(1), equilibria)),
        (4, "kernel derivatives", timed(secs(5), kernel_derivatives)),
        (5, "ODE constraint satisfaction", timed(secs(10), ode_constraint)),
        (6, "hard-constraint interpolation", timed(secs(1), interpolation)),
        (7, "prior reversion", timed(secs(1), reversion)),
    ];
    let start = Instant::now();
    let runs = run_sweep(&ExperimentConfig::default()).unwrap();
    let took = start.elapsed();
    let mut c8 = closed_loop(&runs);
    c8.detail = format!("{} [{took:.2?}, limit 120s]", c8.detail);
    c8.pass &= took < secs(120);
    results.push((8, "closed-loop convergence", c8));
    results.push((9, "metric table shape", table_shape(&runs)));
    results.push((10, "plant integrator", timed(secs(5), integrator)));
    results.push((11, "sweep determinism", determinism()));

    for (n, name, o) in &results {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
