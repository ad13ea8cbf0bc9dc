//! Experiment runner for the two-tank benchmark: configuration, the three
//! controller variants, metrics and file output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use nalgebra::{dvector, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{optimize_hyperparameters_report, OptimizationReport, OptimizerConfig};
use crate::linearize::{linearize, EquilibriumOptions, LinearizedSystem};
use crate::lodegp::{Hyperparameters, LodeGpModel};
use crate::mpc::{
    assemble_dataset, run_closed_loop, BoxConstraints, ClosedLoopTrace, ConstraintMode, ControllerState,
    MpcConfig, TraceSample,
};
use crate::plant::{TwoTank, TwoTankParams};
use crate::polyalg::SmithDecomposition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
pub enum ModelKind {
    /// reference only as prior mean, physical soft constraints
    #[value(name = "A", alias = "a")]
    A,
    /// A plus a hard endpoint at `t_ref`
    #[value(name = "B", alias = "b")]
    B,
    /// soft constraints in a band around the reference
    #[value(name = "C", alias = "c")]
    C,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::A, ModelKind::B, ModelKind::C];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::A => "A",
            ModelKind::B => "B",
            ModelKind::C => "C",
        }
    }
}

/// Which box the constraint-violation metric is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationBox {
    Physical,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub model: ModelKind,
    pub u_e_start_fraction: f64,
    pub u_e_ref_fraction: f64,
    pub t_total: f64,
    /// RK4 substep of the plant simulation.
    pub substep: f64,
    /// Accepted for interface stability; the pipeline has no randomness.
    pub seed: u64,
    pub violation_box: ViolationBox,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            model: ModelKind::B,
            u_e_start_fraction: 0.2,
            u_e_ref_fraction: 0.3,
            t_total: 200.0,
            substep: 0.01,
            seed: 0,
            violation_box: ViolationBox::Physical,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub dt: f64,
    pub horizon: f64,
    pub n_constraint_points: usize,
    pub constraint_start: f64,
    pub t_ref: f64,
    pub band_fraction: f64,
    pub post_ref_hold: bool,
    /// Upper level bound of each tank.
    pub x_max: f64,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            dt: 1.0,
            horizon: 10.0,
            n_constraint_points: 10,
            constraint_start: 1.0,
            t_ref: 100.0,
            band_fraction: 0.1,
            post_ref_hold: true,
            x_max: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub sigma_f_min: f64,
    pub sigma_f_max: f64,
    pub lengthscale_min: f64,
    pub lengthscale_max: f64,
    pub grid_points: usize,
    pub max_iter: usize,
    pub bounded: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerSection {
            sigma_f_min: d.sigma_f_range.0,
            sigma_f_max: d.sigma_f_range.1,
            lengthscale_min: d.lengthscale_range.0,
            lengthscale_max: d.lengthscale_range.1,
            grid_points: d.grid_points,
            max_iter: d.max_iter,
            bounded: d.bounded,
        }
    }
}

impl OptimizerSection {
    pub fn to_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            sigma_f_range: (self.sigma_f_min, self.sigma_f_max),
            lengthscale_range: (self.lengthscale_min, self.lengthscale_max),
            grid_points: self.grid_points,
            max_iter: self.max_iter,
            bounded: self.bounded,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: TwoTankParams,
    pub experiment: ExperimentSection,
    pub mpc: MpcSection,
    pub optimizer: OptimizerSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        let e = &self.experiment;
        for (name, f) in [("u_e_start_fraction", e.u_e_start_fraction), ("u_e_ref_fraction", e.u_e_ref_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {f}")));
            }
        }
        if !(e.t_total >= self.mpc.dt) {
            return Err(Error::Config(format!(
                "t_total ({}) must be at least dt ({})",
                e.t_total, self.mpc.dt
            )));
        }
        if !(e.substep > 0.0) {
            return Err(Error::Config(format!("substep must be positive, got {}", e.substep)));
        }
        if !(self.mpc.x_max > 0.0) {
            return Err(Error::Config(format!("x_max must be positive, got {}", self.mpc.x_max)));
        }
        Ok(())
    }

    pub fn with_model(&self, model: ModelKind) -> Self {
        let mut c = self.clone();
        c.experiment.model = model;
        c
    }

    /// Physical limits on `[x1, x2, u1]`.
    pub fn physical_box(&self) -> BoxConstraints {
        let x = self.mpc.x_max;
        BoxConstraints::new(dvector![0.0, 0.0, 0.0], dvector![x, x, self.plant.u1_max])
            .expect("validated bounds")
    }

    pub fn mpc_config(&self, z_ref: DVector<f64>) -> MpcConfig {
        let m = &self.mpc;
        let model = self.experiment.model;
        MpcConfig {
            horizon: m.horizon,
            n_constraint_points: m.n_constraint_points,
            constraint_start: m.constraint_start,
            dt: m.dt,
            t_ref: (model == ModelKind::B).then_some(m.t_ref),
            z_ref,
            constraint_mode: match model {
                ModelKind::A | ModelKind::B => ConstraintMode::PhysicalBox,
                ModelKind::C => ConstraintMode::ReferenceBand(m.band_fraction),
            },
            use_endpoint: model == ModelKind::B,
            post_ref_hold: m.post_ref_hold,
            physical_box: self.physical_box(),
        }
    }
}

fn require_samples(trace: &ClosedLoopTrace) -> Result<&[TraceSample]> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("metric of an empty trace".into()));
    }
    Ok(&trace.samples)
}

/// Mean over samples of `|x - x_ref|^2`.
pub fn control_error(trace: &ClosedLoopTrace, x_ref: &DVector<f64>) -> Result<f64> {
    let s = require_samples(trace)?;
    Ok(s.iter().map(|p| (&p.x - x_ref).norm_squared()).sum::<f64>() / s.len() as f64)
}

/// Mean Euclidean norm of the posterior (unclamped) control.
pub fn mean_control_input(trace: &ClosedLoopTrace) -> Result<f64> {
    let s = require_samples(trace)?;
    Ok(s.iter().map(|p| p.u_raw.norm()).sum::<f64>() / s.len() as f64)
}

/// Mean summed excess of `[x; u_raw]` over the box.
pub fn constraint_violation(trace: &ClosedLoopTrace, bounds: &BoxConstraints) -> Result<f64> {
    let s = require_samples(trace)?;
    let total: f64 = s
        .iter()
        .map(|p| {
            let z = DVector::from_iterator(p.x.len() + p.u_raw.len(), p.x.iter().chain(p.u_raw.iter()).copied());
            bounds.violation(&z)
        })
        .sum();
    Ok(total / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub control_error: f64,
    pub mean_control_input: f64,
    pub constraint_violation: f64,
}

impl MetricsReport {
    pub fn compute(model: ModelKind, trace: &ClosedLoopTrace, x_ref: &DVector<f64>, bounds: &BoxConstraints) -> Result<Self> {
        Ok(MetricsReport {
            model,
            control_error: control_error(trace, x_ref)?,
            mean_control_input: mean_control_input(trace)?,
            constraint_violation: constraint_violation(trace, bounds)?,
        })
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub start: LinearizedSystem,
    pub reference: LinearizedSystem,
    pub snf: SmithDecomposition,
    pub model: LodeGpModel,
    pub training: OptimizationReport,
    pub trace: ClosedLoopTrace,
    pub metrics: MetricsReport,
    /// Box the violation metric was measured against.
    pub metric_box: BoxConstraints,
}

/// Plant, both equilibria, the reference linearization and its Smith form,
/// and the untrained model.
pub fn build_model(cfg: &ExperimentConfig) -> Result<(TwoTank, LinearizedSystem, LinearizedSystem, LodeGpModel, SmithDecomposition)> {
    cfg.validate()?;
    let plant = TwoTank::new(cfg.plant);
    // equal levels make the coupling Jacobian singular; the lower tank sits lower
    let guess = dvector![cfg.mpc.x_max / 2.0, cfg.mpc.x_max / 4.0];
    let u_start = dvector![cfg.experiment.u_e_start_fraction * cfg.plant.u1_max];
    let u_ref = dvector![cfg.experiment.u_e_ref_fraction * cfg.plant.u1_max];
    let start = linearize(&plant, &u_start, &guess, EquilibriumOptions::default()).map_err(|e| e.at_stage("start equilibrium"))?;
    let reference = linearize(&plant, &u_ref, &guess, EquilibriumOptions::default()).map_err(|e| e.at_stage("reference linearization"))?;
    if !reference.asymptotically_stable {
        log::warn!("reference equilibrium is not asymptotically stable");
    }
    let (model, snf) = LodeGpModel::from_linearization(&reference, Hyperparameters::from_log(0.0, 0.0))
        .map_err(|e| e.at_stage("smith normal form"))?;
    Ok((plant, start, reference, model, snf))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (plant, start, reference, model, snf) = build_model(cfg)?;
    let mpc = cfg.mpc_config(reference.operating_point());

    let untrained = ControllerState::new(model.clone(), mpc.clone(), 0.0, start.u_e.clone()).map_err(|e| e.at_stage("controller"))?;
    let train_data = assemble_dataset(&untrained, &start.x_e).map_err(|e| e.at_stage("training"))?;
    let training = optimize_hyperparameters_report(&model, &train_data, &cfg.optimizer.to_config())
        .map_err(|e| e.at_stage("training"))?;
    log::info!(
        "model {}: sigma_f = {:e}, lengthscale = {}, mll = {}",
        cfg.experiment.model.name(),
        training.hyper.sigma_f(),
        training.hyper.lengthscale(),
        training.mll
    );
    let model = model.with_hyper(training.hyper);

    let mut controller = ControllerState::new(model.clone(), mpc.clone(), 0.0, start.u_e.clone()).map_err(|e| e.at_stage("controller"))?;
    let trace = run_closed_loop(&plant, &start.x_e, &mut controller, cfg.experiment.t_total, cfg.experiment.substep)
        .map_err(|e| e.at_stage("closed loop"))?;
    if trace.state_clamps > 0 || trace.control_clamps > 0 {
        log::warn!(
            "model {}: {} state clamps, {} control clamps",
            cfg.experiment.model.name(),
            trace.state_clamps,
            trace.control_clamps
        );
    }
    let metric_box = match cfg.experiment.violation_box {
        ViolationBox::Physical => cfg.physical_box(),
        ViolationBox::Model => mpc.constraint_box()?,
    };
    let metrics = MetricsReport::compute(cfg.experiment.model, &trace, &reference.x_e, &metric_box)?;
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        start,
        reference,
        snf,
        model,
        training,
        trace,
        metrics,
        metric_box,
    })
}

/// All three models, concurrently; results in `A, B, C` order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ExperimentOutcome>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = ModelKind::ALL
            .iter()
            .map(|&m| {
                let c = cfg.with_model(m);
                s.spawn(move || run_experiment(&c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment thread panicked"))
            .collect()
    })
}

pub const TRACE_HEADER: &str = "t,x1,x2,u1,u1_raw";

pub fn trace_to_csv(trace: &ClosedLoopTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for s in &trace.samples {
        let _ = writeln!(out, "{},{},{},{},{}", s.t, s.x[0], s.x[1], s.u[0], s.u_raw[0]);
    }
    out
}

/// Parses a file written by [`trace_to_csv`]; clamp counters are not stored.
pub fn trace_from_csv(text: &str) -> Result<ClosedLoopTrace> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Config("trace file has an unexpected header".into()));
    }
    let mut trace = ClosedLoopTrace::default();
    for (i, line) in lines.enumerate() {
        let v = line
            .split(',')
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("trace line {}: {e}", i + 2)))?;
        if v.len() != 5 {
            return Err(Error::Config(format!("trace line {} has {} fields", i + 2, v.len())));
        }
        trace.samples.push(TraceSample {
            t: v[0],
            x: dvector![v[1], v[2]],
            u: dvector![v[3]],
            u_raw: dvector![v[4]],
        });
    }
    Ok(trace)
}

pub fn metrics_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("model,control_error,mean_control_input,constraint_violation\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.model.name(),
            r.control_error,
            r.mean_control_input,
            r.constraint_violation
        );
    }
    out
}

pub fn algebra_report(outcome: &ExperimentOutcome) -> String {
    let mut s = String::new();
    let r = &outcome.reference;
    let _ = writeln!(s, "x_e = {:?}", r.x_e.as_slice());
    let _ = writeln!(s, "u_e = {:?}", r.u_e.as_slice());
    let _ = writeln!(s, "A_e = {:?}", r.a_e.row_iter().map(|row| row.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>());
    let _ = writeln!(s, "B_e = {:?}", r.b_e.as_slice());
    let _ = writeln!(s, "asymptotically stable: {}", r.asymptotically_stable);
    let _ = writeln!(s, "latent kernels: {:?}", outcome.model.latent().0);
    let _ = writeln!(
        s,
        "sigma_f = {}, lengthscale = {}",
        outcome.model.hyper.sigma_f(),
        outcome.model.hyper.lengthscale()
    );
    let _ = writeln!(s, "\nD =\n{}", outcome.snf.d);
    let _ = writeln!(s, "W =\n{}", outcome.snf.w);
    let _ = writeln!(s, "V =\n{}", outcome.snf.v);
    s
}

pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut s = format!("{:<22}", "");
    for r in reports {
        let _ = write!(s, "{:>12}", format!("Model ({})", r.model.name()));
    }
    s.push('\n');
    let rows: [(&str, fn(&MetricsReport) -> f64); 3] = [
        ("Control error", |r| r.control_error),
        ("Mean control input", |r| r.mean_control_input),
        ("Constraint error", |r| r.constraint_violation),
    ];
    for (name, f) in rows {
        let _ = write!(s, "{name:<22}");
        for r in reports {
            let _ = write!(s, "{:>12.2e}", f(r));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "lodegp-mpc", about = "GP-based model predictive control of the two-tank system")]
pub struct Args {
    /// TOML configuration file; every field is optional
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Write D, W and V of the Smith form to algebra.txt and stdout
    #[arg(long)]
    pub dump_algebra: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run all three models and print the summary table
    #[arg(long)]
    pub sweep: bool,
}

pub fn execute(args: &Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = args.model {
        cfg.experiment.model = m;
    }
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io(e).at_stage("output"))?;

    let outcomes = if args.sweep {
        run_sweep(&cfg)?
    } else {
        vec![run_experiment(&cfg)?]
    };
    let write = |name: String, body: &str| {
        fs::write(args.out.join(name), body).map_err(|e| Error::Io(e).at_stage("output"))
    };
    for o in &outcomes {
        write(format!("trace_{}.csv", o.metrics.model.name()), &trace_to_csv(&o.trace))?;
    }
    let reports: Vec<_> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    write("metrics.csv".into(), &metrics_to_csv(&reports))?;
    if args.dump_algebra {
        let text = algebra_report(&outcomes[0]);
        print!("{text}");
        write("algebra.txt".into(), &text)?;
    }
    print!("{}", summary_table(&reports));
    Ok(())
}
