//! Condensation of the finite-horizon control program into a dense QP.
//!
//! Predicted outputs are eliminated through forward substitution of the
//! linear model, leaving `z = [u_0..u_{N-1}, eta_0..eta_{N-1}]` as the only
//! decision variables:
//!
//! ```text
//!   y = G u + f,     G[i][j] = C A^{i-j} B_u  (j <= i),
//!   f_i = C (A^{i+1} x0 + sum_j A^{i-j} B_d d_j)
//! ```
//!
//! so the tracking cost `sum Q (y_k - r_k)^2 + lambda u_k^2 + kappa eta_k^2`
//! becomes `1/2 z' H z - c' z` with `H_uu = 2(Q G'G + lambda I)` and
//! `H_eta = 2 kappa I`.
//!
//! Constraint rows come in six fixed blocks of `N` rows each (order matters
//! for auditability and bitwise determinism): delivery ceiling, delivery
//! floor, rate-up, rate-down, soft hypoglycemia floor, slack nonnegativity.

use nalgebra::{DMatrix, DVector, Vector5};

use super::{
    adaptive_weights, disturbance_forecast, reference_trajectory, AugmentedState, LinearModel,
    MpcParams,
};
use crate::error::{Error, Result};
use crate::qp::QpProblem;
use crate::Real;

/// Assemble the condensed QP for one controller cycle. `u_prev` is the
/// previously applied action in deviation coordinates (0 at startup).
pub fn build_condensed_qp<T: Real>(
    model: &LinearModel<T>,
    params: &MpcParams<T>,
    state: &AugmentedState<T>,
    u_prev: T,
) -> Result<QpProblem<T>> {
    params.validate()?;
    state.validate()?;
    if !u_prev.is_finite() {
        return Err(Error::NonFinite("previous action"));
    }
    let n = params.n_c;
    let p = 2 * n;
    let m = 6 * n;

    let y0 = model.output(&state.x);
    let (q_w, lambda) = adaptive_weights(state.iob, y0, state.y_dot, params)?;
    let r = reference_trajectory(y0, n, params);
    let d = disturbance_forecast(state.d, state.y_dot, n, params);

    // Impulse response h_k = C A^k B_u.
    let mut h_imp = Vec::with_capacity(n);
    let mut v: Vector5<T> = model.b_u;
    for _ in 0..n {
        h_imp.push(v[0]);
        v = model.a * v;
    }

    // Free response under the disturbance forecast (no control contribution).
    let mut f = Vec::with_capacity(n);
    let mut xf: Vector5<T> = state.x;
    for dk in d.iter().take(n) {
        xf = model.a * xf + model.b_d * *dk;
        f.push(xf[0]);
    }

    let mut g = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            g[(i, j)] = h_imp[i - j];
        }
    }

    let two = T::one() + T::one();
    let mut h = DMatrix::<T>::zeros(p, p);
    let gtg = g.transpose() * &g;
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = two * q_w * gtg[(i, j)];
        }
        h[(i, i)] += two * lambda;
        h[(n + i, n + i)] = two * params.kappa;
    }

    let mut c = DVector::<T>::zeros(p);
    let err = DVector::<T>::from_fn(n, |k, _| f[k] - r[k]);
    let cu = g.transpose() * &err * (-two * q_w);
    c.rows_mut(0, n).copy_from(&cu);

    let mut a = DMatrix::<T>::zeros(m, p);
    let mut b = DVector::<T>::zeros(m);
    for k in 0..n {
        // Delivery ceiling: u_k <= u_max_abs - u_b.
        a[(k, k)] = T::one();
        b[k] = params.u_max_abs - params.u_b;
        // Delivery floor (pump suspension): -u_k <= u_b.
        a[(n + k, k)] = -T::one();
        b[n + k] = params.u_b;
        // Rate up: u_k - u_{k-1} <= rate_limit.
        a[(2 * n + k, k)] = T::one();
        if k > 0 {
            a[(2 * n + k, k - 1)] = -T::one();
            b[2 * n + k] = params.rate_limit;
        } else {
            b[2 * n + k] = params.rate_limit + u_prev;
        }
        // Rate down: -(u_k - u_{k-1}) <= rate_limit.
        a[(3 * n + k, k)] = -T::one();
        if k > 0 {
            a[(3 * n + k, k - 1)] = T::one();
            b[3 * n + k] = params.rate_limit;
        } else {
            b[3 * n + k] = params.rate_limit - u_prev;
        }
        // Soft hypoglycemia floor: y_k >= hypo_level - eta_k, i.e.
        // -G[k,:] u - eta_k <= f_k - hypo_level.
        for j in 0..=k {
            a[(4 * n + k, j)] = -g[(k, j)];
        }
        a[(4 * n + k, n + k)] = -T::one();
        b[4 * n + k] = f[k] - params.hypo_level;
        // Slack nonnegativity: -eta_k <= 0.
        a[(5 * n + k, n + k)] = -T::one();
        b[5 * n + k] = T::zero();
    }

    QpProblem::with_control_split(h, c, a, b, n)
}
