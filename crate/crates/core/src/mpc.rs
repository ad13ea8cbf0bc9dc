//! Control as inference: every step conditions the GP on the measured state,
//! pseudo-observations for the constraints and optionally an endpoint, then
//! applies the posterior control one sample ahead.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gp::{condition, DataPoint, Dataset, JITTER};
use crate::linearize::NonlinearSystem;
use crate::lodegp::LodeGpModel;
use crate::plant::{simulate_hold, PlantState};

/// Componentwise bounds on the stacked `[x; u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxConstraints {
    pub z_min: DVector<f64>,
    pub z_max: DVector<f64>,
}

impl BoxConstraints {
    pub fn new(z_min: DVector<f64>, z_max: DVector<f64>) -> Result<Self> {
        if z_min.len() != z_max.len() {
            return Err(Error::Shape(format!(
                "box bounds have lengths {} and {}",
                z_min.len(),
                z_max.len()
            )));
        }
        if z_min.iter().zip(z_max.iter()).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidArgument(format!(
                "box lower bound exceeds upper bound: {z_min:?} > {z_max:?}"
            )));
        }
        Ok(BoxConstraints { z_min, z_max })
    }

    /// `[(1 - f) z, (1 + f) z]`, ordered so negative references work too.
    pub fn band(z: &DVector<f64>, fraction: f64) -> Result<Self> {
        let a = z * (1.0 - fraction);
        let b = z * (1.0 + fraction);
        Self::new(a.zip_map(&b, f64::min), a.zip_map(&b, f64::max))
    }

    pub fn dim(&self) -> usize {
        self.z_min.len()
    }

    pub fn contains(&self, z: &DVector<f64>) -> bool {
        self.violation(z) == 0.0
    }

    /// Sum of one-sided excesses of `z` over the bounds.
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        z.iter()
            .zip(self.z_min.iter().zip(self.z_max.iter()))
            .map(|(v, (lo, hi))| (v - hi).max(0.0) + (lo - v).max(0.0))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintMode {
    /// Soft constraints from the physical box.
    PhysicalBox,
    /// Soft constraints from a band of the given relative half-width around
    /// the reference.
    ReferenceBand(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    /// Horizon `T_h`, the last soft-constraint time, in seconds.
    pub horizon: f64,
    pub n_constraint_points: usize,
    /// First soft-constraint time relative to the current step.
    pub constraint_start: f64,
    pub dt: f64,
    pub t_ref: Option<f64>,
    /// Stacked `[x_ref; u_e]`.
    pub z_ref: DVector<f64>,
    pub constraint_mode: ConstraintMode,
    pub use_endpoint: bool,
    pub post_ref_hold: bool,
    /// Physical limits; the control part is also the output clamp.
    pub physical_box: BoxConstraints,
}

impl MpcConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.n_constraint_points == 0 {
            return bad("at least one constraint point is required".into());
        }
        if !(self.constraint_start >= 0.0 && self.horizon >= self.constraint_start) {
            return bad(format!(
                "constraint times [{}, {}] are invalid",
                self.constraint_start, self.horizon
            ));
        }
        if self.use_endpoint && !self.t_ref.is_some_and(|t| t > 0.0) {
            return bad("the endpoint constraint needs t_ref > 0".into());
        }
        if let ConstraintMode::ReferenceBand(f) = self.constraint_mode {
            if !(f > 0.0) {
                return bad(format!("band fraction must be positive, got {f}"));
            }
        }
        if self.z_ref.len() != self.physical_box.dim() || state_dim >= self.z_ref.len() {
            return Err(Error::Shape(format!(
                "reference has {} entries, box {}, state dimension {state_dim}",
                self.z_ref.len(),
                self.physical_box.dim()
            )));
        }
        Ok(())
    }

    /// Box the soft constraints encode.
    pub fn constraint_box(&self) -> Result<BoxConstraints> {
        match self.constraint_mode {
            ConstraintMode::PhysicalBox => Ok(self.physical_box.clone()),
            ConstraintMode::ReferenceBand(f) => BoxConstraints::band(&self.z_ref, f),
        }
    }

    /// `m_c` equally spaced relative times from `constraint_start` to the horizon.
    pub fn constraint_times(&self) -> Vec<f64> {
        let m = self.n_constraint_points;
        if m == 1 {
            return vec![self.constraint_start];
        }
        let span = self.horizon - self.constraint_start;
        (0..m)
            .map(|k| self.constraint_start + span * k as f64 / (m - 1) as f64)
            .collect()
    }
}

/// Pseudo-observations at the box midpoint with variance a quarter of the width.
pub fn make_soft_constraints(bounds: &BoxConstraints, times: &[f64]) -> Dataset {
    let z = (&bounds.z_max + &bounds.z_min) / 2.0;
    let noise = (&bounds.z_max - &bounds.z_min) / 4.0;
    Dataset::new(
        times
            .iter()
            .map(|&t| DataPoint {
                t,
                z: z.clone(),
                noise_var: noise.clone(),
            })
            .collect(),
    )
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

/// The current state and last control, pinned with jitter noise.
pub fn make_init_point(t0: f64, x0: &DVector<f64>, u_prev: &DVector<f64>) -> Dataset {
    let z = stack(x0, u_prev);
    let noise = DVector::from_element(z.len(), JITTER);
    Dataset::new(vec![DataPoint { t: t0, z, noise_var: noise }])
}

pub fn make_endpoint(t_ref: f64, z_ref: &DVector<f64>) -> Dataset {
    Dataset::new(vec![DataPoint {
        t: t_ref,
        z: z_ref.clone(),
        noise_var: DVector::zeros(z_ref.len()),
    }])
}

#[derive(Clone, Debug)]
pub struct ControllerState {
    pub model: LodeGpModel,
    pub config: MpcConfig,
    pub t: f64,
    pub u_prev: DVector<f64>,
}

impl ControllerState {
    pub fn new(model: LodeGpModel, config: MpcConfig, t0: f64, u_prev: DVector<f64>) -> Result<Self> {
        config.validate(model.state_dim())?;
        if u_prev.len() != model.control_dim() || config.z_ref.len() != model.output_dim() {
            return Err(Error::Shape(format!(
                "controller expects {} controls and {} outputs",
                model.control_dim(),
                model.output_dim()
            )));
        }
        Ok(ControllerState {
            model,
            config,
            t: t0,
            u_prev,
        })
    }

    fn holding(&self) -> bool {
        self.config.use_endpoint
            && self.config.post_ref_hold
            && self.config.t_ref.is_some_and(|t_ref| self.t >= t_ref)
    }

    fn u_ref(&self) -> DVector<f64> {
        let nx = self.model.state_dim();
        self.config.z_ref.rows(nx, self.config.z_ref.len() - nx).into_owned()
    }

    fn clamp_control(&self, u: &DVector<f64>) -> (DVector<f64>, bool) {
        let b = &self.config.physical_box;
        let nx = self.model.state_dim();
        let mut out = u.clone();
        let mut hit = false;
        for (k, v) in out.iter_mut().enumerate() {
            let c = v.clamp(b.z_min[nx + k], b.z_max[nx + k]);
            hit |= c != *v;
            *v = c;
        }
        (out, hit)
    }
}

/// Relative-time dataset for one step: init point at 0, soft constraints,
/// and the endpoint while it lies strictly ahead.
pub fn assemble_dataset(state: &ControllerState, x_measured: &DVector<f64>) -> Result<Dataset> {
    let cfg = &state.config;
    let mut data = make_init_point(0.0, x_measured, &state.u_prev)
        .union(make_soft_constraints(&cfg.constraint_box()?, &cfg.constraint_times()));
    if cfg.use_endpoint {
        if let Some(t_ref) = cfg.t_ref {
            let ahead = t_ref - state.t;
            if ahead > 1e-9 {
                data = data.union(make_endpoint(ahead, &cfg.z_ref));
            }
        }
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Control applied to the plant.
    pub u: DVector<f64>,
    /// Control before clamping.
    pub u_raw: DVector<f64>,
}

/// One receding-horizon step; advances `state.t` by `dt` and records the
/// applied control as `u_prev`.
pub fn mpc_step(state: &mut ControllerState, x_measured: &DVector<f64>) -> Result<StepOutput> {
    if x_measured.len() != state.model.state_dim() {
        return Err(Error::Shape(format!(
            "measured state has {} entries, model has {}",
            x_measured.len(),
            state.model.state_dim()
        )));
    }
    let out = if state.holding() {
        let u = state.u_ref();
        StepOutput { u: u.clone(), u_raw: u }
    } else {
        let data = assemble_dataset(state, x_measured)?;
        let post = condition(&state.model, &data)?;
        let nx = state.model.state_dim();
        let mean = post.mean(state.config.dt);
        let u_raw = mean.rows(nx, mean.len() - nx).into_owned();
        let (u, clamped) = state.clamp_control(&u_raw);
        if clamped {
            log::debug!("control clamped at t = {}: raw {:?}", state.t, u_raw.as_slice());
        }
        StepOutput { u, u_raw }
    };
    state.u_prev = out.u.clone();
    state.t += state.config.dt;
    Ok(out)
}

/// Anything that maps a measured state to the next control sample.
pub trait Controller {
    fn sample_time(&self) -> f64;
    fn step(&mut self, x_measured: &DVector<f64>) -> Result<StepOutput>;
}

impl Controller for ControllerState {
    fn sample_time(&self) -> f64 {
        self.config.dt
    }

    fn step(&mut self, x_measured: &DVector<f64>) -> Result<StepOutput> {
        mpc_step(self, x_measured)
    }
}

/// Always outputs the same control.
#[derive(Clone, Debug)]
pub struct ConstantController {
    pub u: DVector<f64>,
    pub dt: f64,
}

impl Controller for ConstantController {
    fn sample_time(&self) -> f64 {
        self.dt
    }

    fn step(&mut self, _x: &DVector<f64>) -> Result<StepOutput> {
        Ok(StepOutput {
            u: self.u.clone(),
            u_raw: self.u.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub u_raw: DVector<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClosedLoopTrace {
    pub samples: Vec<TraceSample>,
    /// Plant substeps whose result had to be clamped into the state domain.
    pub state_clamps: usize,
    /// Steps where the posterior control left the physical box.
    pub control_clamps: usize,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.samples.last().map(|s| &s.x)
    }

    /// State recorded at the sample closest to `t`.
    pub fn state_at(&self, t: f64) -> Option<&DVector<f64>> {
        self.samples
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .map(|s| &s.x)
    }
}

/// Measure, control, hold for one sample time; `floor(t_total / dt) + 1`
/// samples. The final sample still gets a control but is not simulated further.
pub fn run_closed_loop(
    plant: &dyn NonlinearSystem,
    x0: &DVector<f64>,
    controller: &mut dyn Controller,
    t_total: f64,
    substep: f64,
) -> Result<ClosedLoopTrace> {
    let dt = controller.sample_time();
    if !(t_total >= 0.0) {
        return Err(Error::InvalidArgument(format!("total time must be nonnegative, got {t_total}")));
    }
    let steps = (t_total / dt + 1e-9).floor() as usize;
    let mut trace = ClosedLoopTrace::default();
    let mut state = PlantState { x: x0.clone(), t: 0.0 };
    for k in 0..=steps {
        let t = k as f64 * dt;
        state.t = t;
        let fail = |e: Error, trace: &ClosedLoopTrace| Error::ClosedLoop {
            t,
            source: Box::new(e),
            partial: Box::new(trace.clone()),
        };
        let out = match controller.step(&state.x) {
            Ok(o) => o,
            Err(e) => return Err(fail(e, &trace)),
        };
        if out.u != out.u_raw {
            trace.control_clamps += 1;
        }
        trace.samples.push(TraceSample {
            t,
            x: state.x.clone(),
            u: out.u.clone(),
            u_raw: out.u_raw,
        });
        if k == steps {
            break;
        }
        match simulate_hold(plant, &state, &out.u, dt, substep) {
            Ok(hold) => {
                trace.state_clamps += hold.clamps;
                state = hold.state;
            }
            Err(e) => return Err(fail(e, &trace)),
        }
    }
    if trace.state_clamps > 0 {
        log::warn!("state clamped to the domain {} times", trace.state_clamps);
    }
    Ok(trace)
}
