//! Ground-truth plant simulation: the two-tank system and a fixed-step RK4
//! integrator with zero-order-hold control.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::{NonlinearSystem, StateBox};

/// Physical parameters of the two-tank plant, SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoTankParams {
    /// tank cross-section, m^2
    pub area: f64,
    /// pump limit, m^3/s
    pub u1_max: f64,
    /// coupling valve, m^2
    pub c12: f64,
    /// outflow valve, m^2
    pub c2r: f64,
    pub g: f64,
}

impl Default for TwoTankParams {
    fn default() -> Self {
        TwoTankParams {
            area: 0.015,
            u1_max: 2e-4,
            c12: 2.5e-5,
            c2r: 2.5e-5,
            g: 9.81,
        }
    }
}

impl TwoTankParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.area, self.u1_max, self.c12, self.c2r, self.g];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "two-tank parameters must be strictly positive: {self:?}"
            )))
        }
    }

    /// Closed-form equilibrium levels for a constant inflow `u`.
    pub fn equilibrium_levels(&self, u: f64) -> (f64, f64) {
        let x2 = u * u / (2.0 * self.g * self.c2r * self.c2r);
        let x1 = x2 + u * u / (2.0 * self.g * self.c12 * self.c12);
        (x1, x2)
    }

    /// Signed coupling flow from tank 1 to tank 2.
    pub fn coupling_flow(&self, x1: f64, x2: f64) -> f64 {
        let d = x1 - x2;
        self.c12 * d.signum() * (2.0 * self.g * d.abs()).sqrt()
    }

    pub fn outflow(&self, x2: f64) -> f64 {
        self.c2r * (2.0 * self.g * x2).sqrt()
    }
}

/// Level derivatives of the two tanks. Negative levels are rejected.
pub fn two_tank_rhs(x: [f64; 2], u: f64, p: &TwoTankParams) -> Result<[f64; 2]> {
    if x.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidState(format!(
            "tank levels must be nonnegative, got ({}, {})",
            x[0], x[1]
        )));
    }
    let q = p.coupling_flow(x[0], x[1]);
    Ok([(u - q) / p.area, (q - p.outflow(x[1])) / p.area])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TwoTank {
    pub params: TwoTankParams,
}

impl TwoTank {
    pub fn new(params: TwoTankParams) -> Self {
        TwoTank { params }
    }
}

impl NonlinearSystem for TwoTank {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let [a, b] = two_tank_rhs([x[0], x[1]], u[0], &self.params)?;
        Ok(dvector![a, b])
    }

    fn analytic_jacobians(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Option<Result<(DMatrix<f64>, DMatrix<f64>)>> {
        let p = &self.params;
        let (x1, x2) = (x[0], x[1]);
        if x1 == x2 || !(x2 > 0.0) || !(x1 >= 0.0) {
            return Some(Err(Error::NotDifferentiable(format!(
                "two-tank jacobian undefined at ({x1}, {x2})"
            ))));
        }
        let dq = p.c12 * p.g / (2.0 * p.g * (x1 - x2).abs()).sqrt();
        let dout = p.c2r * p.g / (2.0 * p.g * x2).sqrt();
        let a = dmatrix![-dq / p.area, dq / p.area; dq / p.area, -(dq + dout) / p.area];
        let b = dmatrix![1.0 / p.area; 0.0];
        Some(Ok((a, b)))
    }

    fn state_domain(&self) -> Option<StateBox> {
        Some(StateBox {
            lower: dvector![0.0, 0.0],
            upper: dvector![f64::INFINITY, f64::INFINITY],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub t: f64,
}

/// One classical RK4 step with `u` held constant. The result, and every
/// stage argument, is clamped into the system's state domain; the flag
/// reports whether the final clamp changed anything.
pub fn rk4_step(
    sys: &dyn NonlinearSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, bool)> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let domain = sys.state_domain();
    let stage = |mut p: DVector<f64>| {
        if let Some(d) = &domain {
            d.clamp(&mut p);
        }
        sys.rhs(&p, u)
    };
    let k1 = stage(x.clone())?;
    let k2 = stage(x + &k1 * (h / 2.0))?;
    let k3 = stage(x + &k2 * (h / 2.0))?;
    let k4 = stage(x + &k3 * h)?;
    let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration { t: h });
    }
    let clamped = domain.as_ref().is_some_and(|d| d.clamp(&mut next));
    Ok((next, clamped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoldOutcome {
    pub state: PlantState,
    pub substeps: usize,
    pub clamps: usize,
}

pub const DEFAULT_SUBSTEP: f64 = 0.01;

/// Integrates over `duration` with constant `u` in substeps of `h`, the last
/// one shortened to land exactly on the end time.
pub fn simulate_hold(
    sys: &dyn NonlinearSystem,
    start: &PlantState,
    u: &DVector<f64>,
    duration: f64,
    h: f64,
) -> Result<HoldOutcome> {
    if !(duration >= 0.0) || !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid hold: duration {duration}, substep {h}"
        )));
    }
    let n = ((duration / h) - 1e-9).ceil().max(0.0) as usize;
    let mut x = start.x.clone();
    let mut clamps = 0;
    for k in 0..n {
        let step = if k + 1 == n { duration - h * (n - 1) as f64 } else { h };
        let (next, clamped) = rk4_step(sys, &x, u, step).map_err(|e| match e {
            Error::Integration { .. } => Error::Integration {
                t: start.t + h * k as f64,
            },
            other => other,
        })?;
        x = next;
        clamps += usize::from(clamped);
    }
    Ok(HoldOutcome {
        state: PlantState {
            x,
            t: start.t + duration,
        },
        substeps: n,
        clamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::{jacobians, FnSystem};

    #[test]
    fn rhs_cases() {
        let p = TwoTankParams::default();
        let (x1, x2) = p.equilibrium_levels(4e-5);
        let f = two_tank_rhs([x1, x2], 4e-5, &p).unwrap();
        assert!(f[0].abs() < 1e-12 && f[1].abs() < 1e-12);
        let f = two_tank_rhs([0.26095, 0.13048], 4e-5, &p).unwrap();
        assert!(f[0].abs() < 1e-6 && f[1].abs() < 1e-6);

        let f = two_tank_rhs([0.3, 0.3], 1e-4, &p).unwrap();
        assert_eq!(f[0], 1e-4 / p.area);

        let q = p.coupling_flow(0.2, 0.1);
        assert!((q - 3.5017e-5).abs() < 1e-8, "{q}");
        let f = two_tank_rhs([0.2, 0.1], 0.0, &p).unwrap();
        assert!(f[0] < 0.0 && q > 0.0);

        assert!(two_tank_rhs([-0.1, 0.2], 0.0, &p).is_err());
    }

    #[test]
    fn mass_balance_at_equilibrium() {
        let p = TwoTankParams::default();
        for u in [4e-5, 6e-5, 1.5e-4] {
            let (x1, x2) = p.equilibrium_levels(u);
            let q = p.coupling_flow(x1, x2);
            assert!((u - q).abs() < 1e-10);
            assert!((q - p.outflow(x2)).abs() < 1e-10);
        }
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let plant = TwoTank::default();
        let x = dvector![0.26095, 0.13048];
        let u = dvector![4e-5];
        let (a, b) = plant.analytic_jacobians(&x, &u).unwrap().unwrap();
        let fd = FnSystem::new(2, 1, move |x, u| plant.rhs(x, u).unwrap());
        let (fa, fb) = jacobians(&fd, &x, &u).unwrap();
        for (got, want) in fa.iter().zip(a.iter()).chain(fb.iter().zip(b.iter())) {
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-12), "{got} vs {want}");
        }
        assert!(plant
            .analytic_jacobians(&dvector![0.2, 0.2], &u)
            .unwrap()
            .is_err());
    }

    fn decay() -> FnSystem {
        FnSystem::new(1, 1, |x, _| -x)
    }

    #[test]
    fn rk4_exponential_step() {
        let (x, _) = rk4_step(&decay(), &dvector![1.0], &dvector![0.0], 0.1).unwrap();
        assert!((x[0] - 0.9048375).abs() < 1e-7);
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_rejects_nan() {
        let bad = FnSystem::new(1, 1, |_, _| dvector![f64::NAN]);
        assert!(matches!(
            rk4_step(&bad, &dvector![1.0], &dvector![0.0], 0.1),
            Err(Error::Integration { .. })
        ));
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let plant = TwoTank::default();
        let (x1, x2) = plant.params.equilibrium_levels(6e-5);
        let x = dvector![x1, x2];
        let (next, clamped) = rk4_step(&plant, &x, &dvector![6e-5], 0.01).unwrap();
        assert!(!clamped);
        assert!((next - x).amax() < 1e-12);
    }

    #[test]
    fn hold_substep_accounting() {
        let start = PlantState {
            x: dvector![1.0],
            t: 0.0,
        };
        let out = simulate_hold(&decay(), &start, &dvector![0.0], 0.0, 0.01).unwrap();
        assert_eq!(out.substeps, 0);
        assert_eq!(out.state.x, start.x);
        let out = simulate_hold(&decay(), &start, &dvector![0.0], 1.0, 0.01).unwrap();
        assert_eq!(out.substeps, 100);
        assert!((out.state.x[0] - (-1.0f64).exp()).abs() < 1e-10);
        assert_eq!(out.state.t, 1.0);
        let out = simulate_hold(&decay(), &start, &dvector![0.0], 0.025, 0.01).unwrap();
        assert_eq!(out.substeps, 3);
        // three RK4 steps, each with local error below h^5/120
        assert!((out.state.x[0] - (-0.025f64).exp()).abs() < 3e-12);
    }

    #[test]
    fn clamp_is_counted() {
        let drain = FnSystem::new(1, 1, |_, _| dvector![-1.0]).with_domain(StateBox {
            lower: dvector![0.0],
            upper: dvector![f64::INFINITY],
        });
        let start = PlantState {
            x: dvector![0.015],
            t: 0.0,
        };
        let out = simulate_hold(&drain, &start, &dvector![0.0], 0.05, 0.01).unwrap();
        assert_eq!(out.state.x[0], 0.0);
        assert!(out.clamps >= 1);
    }

    #[test]
    fn open_loop_step_converges() {
        let plant = TwoTank::default();
        let p = plant.params;
        let (a1, a2) = p.equilibrium_levels(0.2 * p.u1_max);
        let (b1, b2) = p.equilibrium_levels(0.3 * p.u1_max);
        let start = PlantState {
            x: dvector![a1, a2],
            t: 0.0,
        };
        let u = dvector![0.3 * p.u1_max];
        let out = simulate_hold(&plant, &start, &u, 200.0, DEFAULT_SUBSTEP).unwrap();
        let dist = (out.state.x - dvector![b1, b2]).amax();
        let start_dist = (dvector![a1, a2] - dvector![b1, b2]).amax();
        assert!(dist < start_dist);
        assert_eq!(out.clamps, 0);
    }
}
