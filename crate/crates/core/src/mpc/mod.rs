//! Linear MPC for insulin delivery in deviation coordinates.
//!
//! The controller regulates the linearized glucose model around basal
//! equilibrium. Each cycle it condenses a finite-horizon quadratic program
//! over stacked decision variables `[u_0..u_{N-1}, eta_0..eta_{N-1}]` (insulin
//! deviations and hypoglycemia slack), solves it with the certified
//! active-set method, and applies only the first input.
//!
//! Tuning is state-scheduled rather than fixed: the tracking weight shrinks
//! with insulin-on-board (pending insulin argues for patience), and the input
//! penalty shrinks when glucose rises quickly (a fast rise argues for
//! aggression). Both schedules are configurable floors/ceilings so the
//! closed-loop mapping stays bounded.

mod condense;

pub use condense::build_condensed_qp;

use nalgebra::{Matrix5, RowVector5, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{solve_qp, SolveStatus};
use crate::{lit, Real};

/// Discrete-time linear plant `x_{k+1} = A x_k + B_u u_k + B_d d_k`,
/// `y_k = x_{k,0}` (glucose deviation is the first state).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel<T: Real> {
    pub a: Matrix5<T>,
    pub b_u: Vector5<T>,
    pub b_d: Vector5<T>,
    /// Sample period, minutes.
    pub period: T,
}

impl<T: Real> LinearModel<T> {
    pub fn new(a: Matrix5<T>, b_u: Vector5<T>, b_d: Vector5<T>, period: T) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite())
            || b_u.iter().any(|v| !v.is_finite())
            || b_d.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("linear model matrices"));
        }
        if !period.is_finite() || period <= T::zero() {
            return Err(Error::InvalidParams("sample period must be positive".into()));
        }
        Ok(Self { a, b_u, b_d, period })
    }

    /// Output row: glucose deviation is the first state.
    pub fn c_row() -> RowVector5<T> {
        RowVector5::new(T::one(), T::zero(), T::zero(), T::zero(), T::zero())
    }

    /// Measured output for a given state.
    #[inline]
    pub fn output(&self, x: &Vector5<T>) -> T {
        x[0]
    }
}

/// Tracking-weight schedule `Q(iob) = q_min + (q_max - q_min)/(1 + slope*iob)`.
///
/// A pure hyperbola decays to zero; the floor keeps the weight bounded away
/// from it so the controller never fully stops tracking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QSchedule<T: Real> {
    pub q_max: T,
    pub q_min: T,
    pub slope: T,
}

impl<T: Real> Default for QSchedule<T> {
    fn default() -> Self {
        Self {
            q_max: T::one(),
            q_min: lit(0.05),
            slope: lit(0.25),
        }
    }
}

/// Input-penalty schedule `lambda(y_dot) = min + (max - min) * min(1, 2*sigma(-beta*y_dot))`.
///
/// The doubled logistic pins `lambda(0) = max` and saturates at the ceiling
/// for falling glucose, so the penalty only relaxes on a genuine rise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSchedule<T: Real> {
    pub lambda_min: T,
    pub lambda_max: T,
    pub beta: T,
}

impl<T: Real> Default for LambdaSchedule<T> {
    fn default() -> Self {
        Self {
            lambda_min: lit(0.05),
            lambda_max: T::one(),
            beta: lit(2.0),
        }
    }
}

/// Controller configuration. Insulin quantities are deviations from basal,
/// mU/min; glucose quantities are deviations from basal, mg/dL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcParams<T: Real> {
    /// Prediction/control horizon, steps.
    pub n_c: usize,
    /// Weight on the hypoglycemia slack variables.
    pub kappa: T,
    /// Subject basal rate, mU/min (absolute).
    pub u_b: T,
    /// Absolute delivery ceiling, mU/min.
    pub u_max_abs: T,
    /// Per-step delivery change bound, mU/min.
    pub rate_limit: T,
    /// Soft lower bound on predicted glucose deviation, mg/dL.
    pub hypo_level: T,
    pub q_schedule: QSchedule<T>,
    pub lambda_schedule: LambdaSchedule<T>,
    /// Reference time constant, steps.
    pub ref_decay: T,
    /// Disturbance-forecast time constant, steps (falling-glucose branch).
    pub dist_decay: T,
    /// Glucose-rate threshold separating the forecast branches, mg/dL/min.
    pub dist_rising_threshold: T,
    /// KKT tolerance handed to the QP solver.
    pub solver_tol: T,
}

impl<T: Real> MpcParams<T> {
    /// Defaults for a subject with basal rate `u_b`.
    pub fn defaults(u_b: T) -> Self {
        Self {
            n_c: 24,
            kappa: lit(100.0),
            u_b,
            u_max_abs: lit(1000.0),
            rate_limit: lit(50.0),
            hypo_level: lit(-50.0),
            q_schedule: QSchedule::default(),
            lambda_schedule: LambdaSchedule::default(),
            ref_decay: lit(10.0),
            dist_decay: lit(6.0),
            dist_rising_threshold: lit(0.05),
            solver_tol: lit(1e-8),
        }
    }

    /// Same tuning, retargeted at a different subject's basal rate.
    pub fn with_basal(mut self, u_b: T) -> Self {
        self.u_b = u_b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(Error::InvalidParams("horizon must be at least 1".into()));
        }
        let fin = [
            self.kappa,
            self.u_b,
            self.u_max_abs,
            self.rate_limit,
            self.hypo_level,
            self.q_schedule.q_max,
            self.q_schedule.q_min,
            self.q_schedule.slope,
            self.lambda_schedule.lambda_min,
            self.lambda_schedule.lambda_max,
            self.lambda_schedule.beta,
            self.ref_decay,
            self.dist_decay,
            self.dist_rising_threshold,
            self.solver_tol,
        ];
        if fin.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("controller parameters"));
        }
        if self.kappa <= T::zero() {
            return Err(Error::InvalidParams("kappa must be positive".into()));
        }
        if self.u_b <= T::zero() || self.u_b >= self.u_max_abs {
            return Err(Error::InvalidParams(
                "basal rate must lie strictly inside (0, u_max_abs)".into(),
            ));
        }
        if self.rate_limit <= T::zero() {
            return Err(Error::InvalidParams("rate limit must be positive".into()));
        }
        if self.q_schedule.q_min < T::zero()
            || self.q_schedule.q_max < self.q_schedule.q_min
            || self.q_schedule.q_max <= T::zero()
            || self.q_schedule.slope < T::zero()
        {
            return Err(Error::InvalidParams("tracking-weight schedule".into()));
        }
        if self.lambda_schedule.lambda_min <= T::zero()
            || self.lambda_schedule.lambda_max < self.lambda_schedule.lambda_min
            || self.lambda_schedule.beta < T::zero()
        {
            return Err(Error::InvalidParams("input-penalty schedule".into()));
        }
        if self.ref_decay <= T::zero() || self.dist_decay <= T::zero() {
            return Err(Error::InvalidParams("decay constants must be positive".into()));
        }
        if self.solver_tol <= T::zero() {
            return Err(Error::InvalidParams("solver tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Controller input: deviation plant state plus the estimator/telemetry
/// channels the weight schedules and forecasts consume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentedState<T: Real> {
    /// Deviation state `[G, chi, I_sc1, I_sc2, I_p]`.
    pub x: Vector5<T>,
    /// Disturbance estimate, mg/dL/min.
    pub d: T,
    /// Glucose rate, mg/dL/min.
    pub y_dot: T,
    /// Insulin-on-board, U.
    pub iob: T,
}

impl<T: Real> AugmentedState<T> {
    pub const DIM: usize = 8;

    pub fn new(x: Vector5<T>, d: T, y_dot: T, iob: T) -> Result<Self> {
        let s = Self { x, d, y_dot, iob };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.iter().any(|v| !v.is_finite())
            || !self.d.is_finite()
            || !self.y_dot.is_finite()
            || !self.iob.is_finite()
        {
            return Err(Error::NonFinite("augmented state"));
        }
        if self.iob < T::zero() {
            return Err(Error::InvalidParams("insulin-on-board must be nonnegative".into()));
        }
        Ok(())
    }

    /// Flat layout `[x_0..x_4, d, y_dot, iob]` used by datasets and networks.
    pub fn to_array(&self) -> [T; 8] {
        [
            self.x[0], self.x[1], self.x[2], self.x[3], self.x[4], self.d, self.y_dot, self.iob,
        ]
    }

    pub fn from_array(v: [T; 8]) -> Self {
        Self {
            x: Vector5::new(v[0], v[1], v[2], v[3], v[4]),
            d: v[5],
            y_dot: v[6],
            iob: v[7],
        }
    }
}

/// Scheduled weights `(Q, lambda)` for the current cycle. `y0` participates
/// in validation only; the default schedules key on IOB and the glucose rate.
pub fn adaptive_weights<T: Real>(
    iob: T,
    y0: T,
    y_dot: T,
    params: &MpcParams<T>,
) -> Result<(T, T)> {
    if !iob.is_finite() || !y0.is_finite() || !y_dot.is_finite() {
        return Err(Error::NonFinite("weight-schedule inputs"));
    }
    if iob < T::zero() {
        return Err(Error::InvalidParams("insulin-on-board must be nonnegative".into()));
    }
    let qs = &params.q_schedule;
    let q = qs.q_min + (qs.q_max - qs.q_min) / (T::one() + qs.slope * iob.max(T::zero()));
    let ls = &params.lambda_schedule;
    // 2*sigma(-beta*y_dot) clipped at 1: equals 1 for y_dot <= 0, decays to 0
    // as glucose rises faster.
    let gate = (lit::<T>(2.0) / (T::one() + (ls.beta * y_dot).exp())).min(T::one());
    let lambda = ls.lambda_min + (ls.lambda_max - ls.lambda_min) * gate;
    Ok((q, lambda))
}

/// Decaying reference for the predicted outputs: `r_k = max(y0, 0) * e^{-k/tau}`.
/// Entry `k` targets the `(k+1)`-step-ahead output. Below-basal glucose gets
/// a zero reference — the controller should not chase it downward.
pub fn reference_trajectory<T: Real>(y0: T, n_c: usize, params: &MpcParams<T>) -> Vec<T> {
    let base = y0.max(T::zero());
    (0..n_c)
        .map(|k| base * (-lit::<T>(k as f64) / params.ref_decay).exp())
        .collect()
}

/// Disturbance forecast over the horizon: held constant while glucose is
/// still rising, smoothly driven to zero once the rise has stopped.
pub fn disturbance_forecast<T: Real>(
    d0: T,
    y_dot: T,
    n_c: usize,
    params: &MpcParams<T>,
) -> Vec<T> {
    if y_dot >= params.dist_rising_threshold {
        return vec![d0; n_c];
    }
    (0..n_c)
        .map(|k| d0 * (-lit::<T>(k as f64) / params.dist_decay).exp())
        .collect()
}

/// One controller cycle: condense, solve, certify, return the first input.
#[derive(Clone, Debug)]
pub struct MpcStep<T: Real> {
    /// First input of the optimal sequence, deviation mU/min, clamped to the
    /// delivery box and rate limit.
    pub u: T,
    pub status: SolveStatus,
    pub kkt_residual: T,
    pub iterations: usize,
    pub objective: T,
}

/// Evaluate the control law `u = MPC(x)`. `u_prev` is the previously applied
/// action in deviation coordinates (0 at startup, i.e. basal delivery).
pub fn mpc_step<T: Real>(
    state: &AugmentedState<T>,
    model: &LinearModel<T>,
    params: &MpcParams<T>,
    u_prev: T,
) -> Result<MpcStep<T>> {
    let qp = build_condensed_qp(model, params, state, u_prev)?;
    let sol = solve_qp(&qp, params.solver_tol)?;
    let lo = (-params.u_b).max(u_prev - params.rate_limit);
    let hi = (params.u_max_abs - params.u_b).min(u_prev + params.rate_limit);
    // The solver certifies feasibility at Optimal; the clamp only defends
    // MaxIter iterates so the safety envelope holds unconditionally.
    let u = sol.u_seq[0].max(lo).min(hi);
    Ok(MpcStep {
        u,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        objective: sol.objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glucose::{basal_model, SubjectParams};
    use crate::qp::solve_qp_pg_oracle;
    use approx::assert_relative_eq;

    fn nominal_setup() -> (LinearModel<f64>, MpcParams<f64>) {
        let subject = SubjectParams::<f64>::nominal();
        let model = basal_model(&subject, 5.0).unwrap();
        let params = MpcParams::defaults(subject.u_b);
        (model, params)
    }

    #[test]
    fn schedule_extremes_at_zero() {
        let params = MpcParams::<f64>::defaults(13.0);
        let (q, lambda) = adaptive_weights(0.0, 0.0, 0.0, &params).unwrap();
        assert_relative_eq!(q, params.q_schedule.q_max, max_relative = 1e-12);
        assert_relative_eq!(lambda, params.lambda_schedule.lambda_max, max_relative = 1e-12);
    }

    #[test]
    fn tracking_weight_decreases_with_iob() {
        let params = MpcParams::<f64>::defaults(13.0);
        let (q1, l1) = adaptive_weights(1.0, 0.0, 0.0, &params).unwrap();
        let (q2, l2) = adaptive_weights(3.0, 0.0, 0.0, &params).unwrap();
        assert!(q1 > q2);
        assert_eq!(l1, l2);
        assert!(q2 >= params.q_schedule.q_min);
    }

    #[test]
    fn pure_hyperbola_point() {
        // q_min = 0 reduces the schedule to q_max/(1 + slope*iob).
        let mut params = MpcParams::<f64>::defaults(13.0);
        params.q_schedule = QSchedule { q_max: 1.0, q_min: 0.0, slope: 0.5 };
        let (q, _) = adaptive_weights(2.0, 0.0, 0.0, &params).unwrap();
        assert_relative_eq!(q, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn input_penalty_relaxes_on_rise_only() {
        let params = MpcParams::<f64>::defaults(13.0);
        let lam = |yd: f64| adaptive_weights(0.0, 0.0, yd, &params).unwrap().1;
        assert!(lam(0.5) > lam(2.0), "strictly decreasing while rising");
        assert!(lam(2.0) > params.lambda_schedule.lambda_min);
        // Falling glucose saturates at the ceiling.
        assert_relative_eq!(lam(-1.0), params.lambda_schedule.lambda_max, max_relative = 1e-12);
    }

    #[test]
    fn weights_reject_non_finite() {
        let params = MpcParams::<f64>::defaults(13.0);
        assert!(adaptive_weights(f64::NAN, 0.0, 0.0, &params).is_err());
        assert!(adaptive_weights(0.0, 0.0, f64::INFINITY, &params).is_err());
    }

    #[test]
    fn reference_decay_points() {
        let params = MpcParams::<f64>::defaults(13.0);
        let r = reference_trajectory(100.0, 24, &params);
        assert_relative_eq!(r[0], 100.0, max_relative = 1e-12);
        assert_relative_eq!(r[10], 100.0 * (-1.0f64).exp(), max_relative = 1e-12);
        for w in r.windows(2) {
            assert!(w[1].abs() <= w[0].abs());
        }
        assert!(reference_trajectory(-10.0, 8, &params).iter().all(|v| *v == 0.0));
        assert!(reference_trajectory(0.0, 8, &params).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forecast_branches() {
        let params = MpcParams::<f64>::defaults(13.0);
        let rising = disturbance_forecast(2.0, 0.1, 24, &params);
        assert!(rising.iter().all(|v| *v == 2.0));
        let falling = disturbance_forecast(2.0, 0.0, 24, &params);
        assert_relative_eq!(falling[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(falling[6], 2.0 * (-1.0f64).exp(), max_relative = 1e-12);
        for w in falling.windows(2) {
            assert!(w[1].abs() <= w[0].abs());
        }
        assert!(disturbance_forecast(0.0, -1.0, 8, &params).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equilibrium_state_holds_basal() {
        let (model, params) = nominal_setup();
        let state = AugmentedState::new(Vector5::zeros(), 0.0, 0.0, 0.0).unwrap();
        let step = mpc_step(&state, &model, &params, 0.0).unwrap();
        assert_eq!(step.status, SolveStatus::Optimal);
        assert!(step.u.abs() <= 1e-9, "u = {}", step.u);
    }

    #[test]
    fn deep_hypoglycemia_suspends_delivery() {
        let (model, params) = nominal_setup();
        let state =
            AugmentedState::new(Vector5::new(-80.0, 0.0, 0.0, 0.0, 0.0), -1.0, -1.0, 0.0).unwrap();
        let step = mpc_step(&state, &model, &params, 0.0).unwrap();
        assert_eq!(step.status, SolveStatus::Optimal);
        assert_relative_eq!(step.u, -params.u_b, max_relative = 1e-9);

        // Cross-check the full solution against the independent solver.
        let qp = build_condensed_qp(&model, &params, &state, 0.0).unwrap();
        let oracle = solve_qp_pg_oracle(&qp, 20_000, 1e-12).unwrap();
        assert_relative_eq!(oracle.u_seq[0], -params.u_b, epsilon = 1e-4);
    }

    #[test]
    fn output_respects_safety_envelope() {
        let (model, params) = nominal_setup();
        // A strong hyperglycemic excursion asks for much more insulin than
        // the rate limit allows in one step.
        let state =
            AugmentedState::new(Vector5::new(150.0, 0.0, 0.0, 0.0, 0.0), 2.0, 1.5, 0.5).unwrap();
        let u_prev = 0.0;
        let step = mpc_step(&state, &model, &params, u_prev).unwrap();
        assert!(step.u >= -params.u_b - 1e-12);
        assert!(step.u <= params.u_max_abs - params.u_b + 1e-12);
        assert!((step.u - u_prev).abs() <= params.rate_limit + 1e-9);
    }

    #[test]
    fn control_law_is_deterministic() {
        let (model, params) = nominal_setup();
        let state =
            AugmentedState::new(Vector5::new(40.0, 1.0, 5.0, 3.0, 2.0), 0.8, 0.3, 1.2).unwrap();
        let a = mpc_step(&state, &model, &params, 4.0).unwrap();
        let b = mpc_step(&state, &model, &params, 4.0).unwrap();
        assert_eq!(a.u.to_bits(), b.u.to_bits());
    }

    #[test]
    fn control_is_locally_affine() {
        let (model, params) = nominal_setup();
        // Fixed iob / y_dot / sign(y0) keep every schedule on one branch;
        // perturb the remaining coordinates along a line.
        let base =
            AugmentedState::new(Vector5::new(30.0, 0.5, 2.0, 1.0, 1.0), 0.5, 0.2, 1.0).unwrap();
        let dir = (Vector5::new(1.0, 0.3, -0.5, 0.2, 0.1), 0.05);
        let eps = 1e-4;
        let probe = |s: f64| {
            let state = AugmentedState::new(
                base.x + dir.0 * s,
                base.d + dir.1 * s,
                base.y_dot,
                base.iob,
            )
            .unwrap();
            mpc_step(&state, &model, &params, 0.0).unwrap().u
        };
        let (lo, mid, hi) = (probe(-eps), probe(0.0), probe(eps));
        let residual = (lo + hi - 2.0 * mid).abs();
        assert!(residual <= 1e-6, "collinearity residual {residual}");
    }

    #[test]
    fn params_validation_catches_misconfiguration() {
        let mut p = MpcParams::<f64>::defaults(13.0);
        p.n_c = 0;
        assert!(p.validate().is_err());
        let mut p = MpcParams::<f64>::defaults(13.0);
        p.kappa = 0.0;
        assert!(p.validate().is_err());
        let mut p = MpcParams::<f64>::defaults(13.0);
        p.u_b = 1200.0;
        assert!(p.validate().is_err());
        let mut p = MpcParams::<f64>::defaults(13.0);
        p.lambda_schedule.lambda_min = 0.0;
        assert!(p.validate().is_err());
        assert!(MpcParams::<f64>::defaults(13.0).validate().is_ok());
    }

    #[test]
    fn augmented_state_round_trips_through_array() {
        let s = AugmentedState::new(Vector5::new(1.0, 2.0, 3.0, 4.0, 5.0), 6.0, 7.0, 8.0).unwrap();
        let rt = AugmentedState::from_array(s.to_array());
        assert_eq!(s, rt);
        assert!(AugmentedState::new(Vector5::zeros(), f64::NAN, 0.0, 0.0).is_err());
        assert!(AugmentedState::new(Vector5::zeros(), 0.0, 0.0, -0.1).is_err());
    }
}
