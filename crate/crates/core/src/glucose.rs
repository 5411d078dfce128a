//! Nonlinear glucose–insulin plant, its linearization around basal
//! equilibrium, exact zero-order-hold discretization, a disturbance-augmented
//! Kalman filter, and the two derived controller inputs (insulin-on-board and
//! glucose rate of change).
//!
//! Units throughout: glucose `G` in mg/dL, remote insulin effect `chi` in
//! 1/min-compatible mU/L, subcutaneous and plasma insulin in mU and mU/L,
//! insulin delivery `u` in mU/min, meal disturbance `d` in mg/dL/min, time in
//! minutes.

use nalgebra::{Matrix5, Matrix6, SMatrix, Vector5, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mpc::LinearModel;
use crate::{lit, Real};

/// Physiological parameters of one subject.
///
/// `u_b` is not free: it is the basal delivery that holds plasma insulin at
/// `i_b`, recomputed by [`SubjectParams::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "SubjectParamsFree<T>",
    into = "SubjectParamsFree<T>",
    bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>")
)]
pub struct SubjectParams<T: Real> {
    /// Glucose effectiveness (1/min).
    pub s_g: T,
    /// Basal glucose (mg/dL).
    pub g_b: T,
    /// Insulin sensitivity (1/min per mU/L).
    pub s_i: T,
    /// Remote insulin compartment rate (1/min).
    pub p_2: T,
    /// Subcutaneous absorption rates (1/min).
    pub k_a1: T,
    pub k_d: T,
    pub k_a2: T,
    /// Plasma insulin clearance (1/min).
    pub k_cl: T,
    /// Insulin distribution volume (L/kg).
    pub v_i: T,
    /// Body weight (kg).
    pub bw: T,
    /// Basal plasma insulin (mU/L).
    pub i_b: T,
    /// Basal delivery (mU/min), derived from the steady-state condition.
    pub u_b: T,
}

/// Serialized form of [`SubjectParams`]: the free parameters only. `u_b` is
/// derived, so it never round-trips through config files; [`SubjectParams::new`]
/// recomputes it on load, which also re-validates the set.
#[derive(Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>")
)]
struct SubjectParamsFree<T> {
    s_g: T,
    g_b: T,
    s_i: T,
    p_2: T,
    k_a1: T,
    k_d: T,
    k_a2: T,
    k_cl: T,
    v_i: T,
    bw: T,
    i_b: T,
}

impl<T: Real> TryFrom<SubjectParamsFree<T>> for SubjectParams<T> {
    type Error = Error;

    fn try_from(f: SubjectParamsFree<T>) -> Result<Self> {
        SubjectParams::new(
            f.s_g, f.g_b, f.s_i, f.p_2, f.k_a1, f.k_d, f.k_a2, f.k_cl, f.v_i, f.bw, f.i_b,
        )
    }
}

impl<T: Real> From<SubjectParams<T>> for SubjectParamsFree<T> {
    fn from(p: SubjectParams<T>) -> Self {
        SubjectParamsFree {
            s_g: p.s_g,
            g_b: p.g_b,
            s_i: p.s_i,
            p_2: p.p_2,
            k_a1: p.k_a1,
            k_d: p.k_d,
            k_a2: p.k_a2,
            k_cl: p.k_cl,
            v_i: p.v_i,
            bw: p.bw,
            i_b: p.i_b,
        }
    }
}

impl<T: Real> SubjectParams<T> {
    /// Build a parameter set, deriving `u_b` from the requirement that plasma
    /// insulin rests at `i_b` under constant delivery.
    pub fn new(
        s_g: T,
        g_b: T,
        s_i: T,
        p_2: T,
        k_a1: T,
        k_d: T,
        k_a2: T,
        k_cl: T,
        v_i: T,
        bw: T,
        i_b: T,
    ) -> Result<Self> {
        let vals = [s_g, g_b, s_i, p_2, k_a1, k_d, k_a2, k_cl, v_i, bw, i_b];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("subject parameters"));
        }
        if vals.iter().any(|v| *v <= T::zero()) {
            return Err(Error::InvalidParams(
                "subject parameters must be strictly positive".into(),
            ));
        }
        if g_b < lit(70.0) || g_b > lit(180.0) {
            return Err(Error::InvalidParams(
                "basal glucose must lie within 70..=180 mg/dL".into(),
            ));
        }
        // At steady state the subcutaneous chain passes delivery through
        // unchanged, so I_p settles at u_b / (k_cl * V_I * BW).
        let u_b = k_cl * v_i * bw * i_b;
        Ok(Self { s_g, g_b, s_i, p_2, k_a1, k_d, k_a2, k_cl, v_i, bw, i_b, u_b })
    }

    /// Nominal adult parameter set.
    pub fn nominal() -> Self {
        Self::new(
            lit(0.01),
            lit(120.0),
            lit(5.0e-4),
            lit(0.02),
            lit(0.004),
            lit(0.0164),
            lit(0.0182),
            lit(0.13),
            lit(0.12),
            lit(70.0),
            lit(12.0),
        )
        .expect("nominal parameters are valid")
    }
}

/// Full plant state. `d` integrates with zero derivative; the simulator
/// overwrites it with the current meal appearance before each substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState<T: Real> {
    /// Plasma glucose (mg/dL).
    pub g: T,
    /// Remote insulin effect (mU/L).
    pub chi: T,
    /// Subcutaneous insulin, first and second compartment (mU).
    pub i_sc1: T,
    pub i_sc2: T,
    /// Plasma insulin (mU/L).
    pub i_p: T,
    /// Glucose appearance disturbance (mg/dL/min).
    pub d: T,
}

impl<T: Real> PlantState<T> {
    /// Resting state under basal delivery: all derivatives vanish at `u_b`.
    pub fn equilibrium(p: &SubjectParams<T>) -> Self {
        let i_sc1 = p.u_b / (p.k_a1 + p.k_d);
        Self {
            g: p.g_b,
            chi: T::zero(),
            i_sc1,
            i_sc2: p.k_d * i_sc1 / p.k_a2,
            i_p: p.i_b,
            d: T::zero(),
        }
    }

    fn to_vec6(self) -> Vector6<T> {
        Vector6::new(self.g, self.chi, self.i_sc1, self.i_sc2, self.i_p, self.d)
    }

    fn from_vec6(v: Vector6<T>) -> Self {
        Self { g: v[0], chi: v[1], i_sc1: v[2], i_sc2: v[3], i_p: v[4], d: v[5] }
    }
}

/// Time derivative of the plant state under delivery `u` (mU/min).
pub fn nonlinear_rhs<T: Real>(s: &PlantState<T>, u: T, p: &SubjectParams<T>) -> PlantState<T> {
    let dist_vol = p.v_i * p.bw;
    PlantState {
        g: -p.s_g * (s.g - p.g_b) - p.s_i * s.chi * s.g + s.d,
        chi: -p.p_2 * s.chi + p.p_2 * (s.i_p - p.i_b),
        i_sc1: -(p.k_a1 + p.k_d) * s.i_sc1 + u,
        i_sc2: -p.k_a2 * s.i_sc2 + p.k_d * s.i_sc1,
        i_p: -p.k_cl * s.i_p + (p.k_a1 * s.i_sc1 + p.k_a2 * s.i_sc2) / dist_vol,
        d: T::zero(),
    }
}

/// One fixed-step RK4 integration step of length `dt` minutes under constant
/// delivery `u`. Glucose is clamped at a floor of 1 mg/dL; the returned flag
/// is true when the clamp engaged (callers treat such trajectories as
/// degenerate).
pub fn integrate_step<T: Real>(
    s: &PlantState<T>,
    u: T,
    dt: T,
    p: &SubjectParams<T>,
) -> Result<(PlantState<T>, bool)> {
    if !u.is_finite() || !dt.is_finite() || dt <= T::zero() {
        return Err(Error::NonFinite("integration inputs"));
    }
    let f = |v: Vector6<T>| nonlinear_rhs(&PlantState::from_vec6(v), u, p).to_vec6();
    let y = s.to_vec6();
    let half = lit::<T>(0.5);
    let k1 = f(y);
    let k2 = f(y + k1 * (half * dt));
    let k3 = f(y + k2 * (half * dt));
    let k4 = f(y + k3 * dt);
    let sixth = lit::<T>(1.0 / 6.0);
    let two = lit::<T>(2.0);
    let mut out = y + (k1 + k2 * two + k3 * two + k4) * (dt * sixth);
    let floor = T::one();
    let clamped = out[0] < floor;
    if clamped {
        out[0] = floor;
    }
    Ok((PlantState::from_vec6(out), clamped))
}

/// Continuous-time linearization `(A_c, B_uc, B_dc)` of the five insulin and
/// glucose states at the basal operating point `(u_op, g_op)`.
///
/// The operating point must be an equilibrium of the plant (checked), which
/// for `u_op = u_b`, `g_op = g_b` is [`PlantState::equilibrium`].
pub fn linearize<T: Real>(
    p: &SubjectParams<T>,
    g_op: T,
    u_op: T,
) -> Result<(Matrix5<T>, Vector5<T>, Vector5<T>)> {
    if !g_op.is_finite() || !u_op.is_finite() {
        return Err(Error::NonFinite("operating point"));
    }
    // Equilibrium implied by constant delivery u_op.
    let dist_vol = p.v_i * p.bw;
    let i_p_op = u_op / (p.k_cl * dist_vol);
    let chi_op = i_p_op - p.i_b;
    let g_residual = -p.s_g * (g_op - p.g_b) - p.s_i * chi_op * g_op;
    if g_residual.abs() > lit::<T>(1e-6) * (T::one() + g_op.abs()) {
        return Err(Error::InvalidParams(
            "operating point is not a plant equilibrium".into(),
        ));
    }

    let mut a = Matrix5::zeros();
    // dG/dt row.
    a[(0, 0)] = -p.s_g - p.s_i * chi_op;
    a[(0, 1)] = -p.s_i * g_op;
    // dchi/dt row.
    a[(1, 1)] = -p.p_2;
    a[(1, 4)] = p.p_2;
    // Subcutaneous chain.
    a[(2, 2)] = -(p.k_a1 + p.k_d);
    a[(3, 2)] = p.k_d;
    a[(3, 3)] = -p.k_a2;
    // Plasma insulin.
    a[(4, 2)] = p.k_a1 / dist_vol;
    a[(4, 3)] = p.k_a2 / dist_vol;
    a[(4, 4)] = -p.k_cl;

    let b_u = Vector5::new(T::zero(), T::zero(), T::one(), T::zero(), T::zero());
    let b_d = Vector5::new(T::one(), T::zero(), T::zero(), T::zero(), T::zero());
    Ok((a, b_u, b_d))
}

/// Exact zero-order-hold discretization over period `t` minutes via the
/// augmented matrix exponential: one `exp` of the 7x7 block matrix yields the
/// discrete `A` together with both input columns.
pub fn discretize<T: Real>(
    a_c: &Matrix5<T>,
    b_uc: &Vector5<T>,
    b_dc: &Vector5<T>,
    t: T,
) -> Result<LinearModel<T>> {
    if !t.is_finite() || t <= T::zero() {
        return Err(Error::InvalidParams("sample period must be positive".into()));
    }
    let mut m = SMatrix::<T, 7, 7>::zeros();
    m.fixed_view_mut::<5, 5>(0, 0).copy_from(a_c);
    m.fixed_view_mut::<5, 1>(0, 5).copy_from(b_uc);
    m.fixed_view_mut::<5, 1>(0, 6).copy_from(b_dc);
    let e = (m * t).exp();
    let a = e.fixed_view::<5, 5>(0, 0).into_owned();
    let b_u = e.fixed_view::<5, 1>(0, 5).into_owned();
    let b_d = e.fixed_view::<5, 1>(0, 6).into_owned();
    LinearModel::new(a, b_u, b_d, t)
}

/// Convenience: linearize at the subject's basal equilibrium and discretize.
pub fn basal_model<T: Real>(p: &SubjectParams<T>, period: T) -> Result<LinearModel<T>> {
    let (a, b_u, b_d) = linearize(p, p.g_b, p.u_b)?;
    discretize(&a, &b_u, &b_d, period)
}

/// Kalman filter state over the disturbance-augmented model
/// `[x; d]` with a random-walk disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState<T: Real> {
    /// Deviation-state estimate (5 plant states).
    pub x_hat: Vector5<T>,
    /// Disturbance estimate (mg/dL/min).
    pub d_hat: T,
    /// Covariance of the augmented estimate.
    pub p: Matrix6<T>,
}

impl<T: Real> EstimatorState<T> {
    /// Zero estimate with diagonal initial covariance.
    pub fn new(p0: T) -> Self {
        Self { x_hat: Vector5::zeros(), d_hat: T::zero(), p: Matrix6::identity() * p0 }
    }
}

/// Process/measurement noise for [`kalman_step`]. The last diagonal entry
/// drives the disturbance random walk.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanNoise<T: Real> {
    pub q_diag: Vector6<T>,
    pub r: T,
}

impl<T: Real> KalmanNoise<T> {
    pub fn new(q_diag: Vector6<T>, r: T) -> Result<Self> {
        if q_diag.iter().any(|v| !v.is_finite() || *v < T::zero()) || !r.is_finite() {
            return Err(Error::NonFinite("kalman noise"));
        }
        if r <= T::zero() {
            return Err(Error::InvalidParams("measurement variance must be > 0".into()));
        }
        Ok(Self { q_diag, r })
    }

    /// Default tuning for a CGM with ~2 mg/dL noise at a 5 min period.
    pub fn default_cgm() -> Self {
        Self::new(
            Vector6::new(lit(1e-3), lit(1e-4), lit(1e-2), lit(1e-2), lit(1e-4), lit(5e-2)),
            lit(4.0),
        )
        .expect("default noise is valid")
    }
}

/// One predict-then-update cycle of the augmented filter.
///
/// `y` is the measured glucose deviation (mg/dL), `u` the deviation delivery
/// applied over the elapsed period. The update uses the Joseph form, which
/// keeps the covariance symmetric positive semidefinite.
pub fn kalman_step<T: Real>(
    est: &EstimatorState<T>,
    y: T,
    u: T,
    model: &LinearModel<T>,
    noise: &KalmanNoise<T>,
) -> Result<EstimatorState<T>> {
    if !y.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite("kalman inputs"));
    }
    // Augmented transition: x+ = A x + B_u u + B_d d, d+ = d.
    let mut f = Matrix6::identity();
    f.fixed_view_mut::<5, 5>(0, 0).copy_from(&model.a);
    f.fixed_view_mut::<5, 1>(0, 5).copy_from(&model.b_d);
    let mut g_u = Vector6::zeros();
    g_u.fixed_view_mut::<5, 1>(0, 0).copy_from(&model.b_u);
    let mut h = nalgebra::RowSVector::<T, 6>::zeros();
    h[0] = T::one();

    let mut xa = Vector6::zeros();
    xa.fixed_view_mut::<5, 1>(0, 0).copy_from(&est.x_hat);
    xa[5] = est.d_hat;

    // Predict.
    let x_pred = f * xa + g_u * u;
    let mut p_pred = f * est.p * f.transpose();
    for i in 0..6 {
        p_pred[(i, i)] += noise.q_diag[i];
    }

    // Update (Joseph form).
    let innov = y - (h * x_pred)[0];
    let s = (h * p_pred * h.transpose())[0] + noise.r;
    let k = p_pred * h.transpose() / s;
    let x_new = x_pred + k * innov;
    let ikh = Matrix6::identity() - k * h;
    let p_new = ikh * p_pred * ikh.transpose() + k * noise.r * k.transpose();
    let p_sym = (p_new + p_new.transpose()) * lit::<T>(0.5);

    Ok(EstimatorState {
        x_hat: x_new.fixed_view::<5, 1>(0, 0).into_owned(),
        d_hat: x_new[5],
        p: p_sym,
    })
}

/// Ring buffer of delivered insulin `(time, mU/min)` used for the
/// insulin-on-board computation. Entries must arrive on the sampling grid;
/// gaps are rejected so IOB is never silently computed from partial history.
#[derive(Debug, Clone)]
pub struct InsulinHistory<T: Real> {
    entries: VecDeque<(T, T)>,
    period: T,
    /// Linear decay duration of the activity curve (minutes).
    decay: T,
    capacity: usize,
}

impl<T: Real> InsulinHistory<T> {
    /// `period` is the sampling interval (minutes), `decay` the activity
    /// duration. Capacity covers twice the decay window.
    pub fn new(period: T, decay: T) -> Result<Self> {
        if period <= T::zero() || decay <= period {
            return Err(Error::InvalidParams("need decay > period > 0".into()));
        }
        let capacity = (decay / period).to_usize().unwrap_or(48) * 2 + 2;
        Ok(Self { entries: VecDeque::with_capacity(capacity), period, decay, capacity })
    }

    /// Pre-fill the window ending at `t_end` (exclusive) with constant basal
    /// delivery, so IOB is well-defined from the first control cycle.
    pub fn preload_basal(&mut self, u_b: T, t_end: T) {
        self.entries.clear();
        let n = self.capacity - 1;
        for i in (1..=n).rev() {
            let t = t_end - self.period * T::from_usize(i).unwrap();
            self.entries.push_back((t, u_b));
        }
    }

    /// Append a delivery sample. Must be exactly one period after the last.
    pub fn push(&mut self, t: T, delivered: T) -> Result<()> {
        if !t.is_finite() || !delivered.is_finite() {
            return Err(Error::NonFinite("history entry"));
        }
        if let Some(&(t_last, _)) = self.entries.back() {
            let gap = t - t_last;
            if (gap - self.period).abs() > lit::<T>(1e-9) * self.period {
                return Err(Error::History(format!(
                    "non-contiguous insulin history: expected step {:?}, got {:?}",
                    self.period, gap
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, delivered));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insulin-on-board at time `now` in U: above-basal delivery weighted by
    /// the remaining-activity curve `c(tau) = max(0, 1 - tau/decay)`.
    pub fn iob(&self, u_b: T, now: T) -> Result<T> {
        let oldest = self
            .entries
            .front()
            .ok_or_else(|| Error::History("empty insulin history".into()))?
            .0;
        if now - oldest < self.decay - self.period * lit::<T>(0.5) {
            return Err(Error::History(
                "insulin history does not cover the decay window".into(),
            ));
        }
        let mut total = T::zero();
        for &(t, delivered) in &self.entries {
            let tau = now - t;
            if tau < T::zero() {
                return Err(Error::History("history entry from the future".into()));
            }
            let weight = (T::one() - tau / self.decay).max(T::zero());
            let above = (delivered - u_b).max(T::zero());
            total += above * self.period * weight;
        }
        // mU -> U.
        Ok(total / lit::<T>(1000.0))
    }
}

/// Least-squares slope (mg/dL/min) of the last three glucose samples taken
/// `period` minutes apart. For three equispaced points the fit reduces to the
/// symmetric difference of the endpoints.
pub fn glucose_rate<T: Real>(y_recent: &[T], period: T) -> Result<T> {
    let n = y_recent.len();
    if n < 3 {
        return Err(Error::History(format!(
            "glucose rate needs 3 samples, have {n}"
        )));
    }
    if period <= T::zero() {
        return Err(Error::InvalidParams("period must be positive".into()));
    }
    let window = &y_recent[n - 3..];
    if window.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("glucose samples"));
    }
    Ok((window[2] - window[0]) / (lit::<T>(2.0) * period))
}
