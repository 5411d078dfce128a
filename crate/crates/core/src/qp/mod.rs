//! Dense convex quadratic programming.
//!
//! Problems are posed as
//!
//! ```text
//!   minimize    1/2 z' H z  -  c' z
//!   subject to  A z <= b
//! ```
//!
//! with `H` symmetric positive definite. Two solvers are provided:
//!
//! * [`solve_qp`] — a dual active-set method with factor updates, the
//!   production path (exact, finite termination);
//! * [`solve_qp_pg_oracle`] — an accelerated projected-gradient method with
//!   Dykstra projections, deliberately built on different numerics so the two
//!   can cross-check each other. It is a verification oracle, not a
//!   production path.
//!
//! Every solution carries its own KKT residual so callers can certify
//! optimality independently of solver internals.

mod active_set;
mod projected;

pub use active_set::solve_qp;
pub use projected::solve_qp_pg_oracle;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::{lit, Real};

/// How a solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Converged with all constraints satisfied to tolerance.
    Optimal,
    /// Iteration budget exhausted; best iterate returned.
    MaxIter,
    /// A constraint was proven unsatisfiable.
    Infeasible,
}

/// A dense inequality-constrained QP instance.
///
/// The decision vector is `[u_0..u_{n_controls-1}, eta_...]`; for problems
/// without slack variables `n_controls` equals the full dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real> {
    pub h: DMatrix<T>,
    pub c: DVector<T>,
    pub a_ineq: DMatrix<T>,
    pub b_ineq: DVector<T>,
    n_controls: usize,
}

impl<T: Real> QpProblem<T> {
    /// Problem without a control/slack split (all variables are controls).
    pub fn new(
        h: DMatrix<T>,
        c: DVector<T>,
        a_ineq: DMatrix<T>,
        b_ineq: DVector<T>,
    ) -> Result<Self> {
        let n = c.len();
        Self::with_control_split(h, c, a_ineq, b_ineq, n)
    }

    /// Problem whose first `n_controls` variables are controls and the rest
    /// slacks, as produced by the condensed MPC formulation.
    pub fn with_control_split(
        h: DMatrix<T>,
        c: DVector<T>,
        a_ineq: DMatrix<T>,
        b_ineq: DVector<T>,
        n_controls: usize,
    ) -> Result<Self> {
        let p = c.len();
        if h.nrows() != p || h.ncols() != p {
            return Err(Error::Dimension(format!(
                "H is {}x{}, expected {p}x{p}",
                h.nrows(),
                h.ncols()
            )));
        }
        if a_ineq.ncols() != p || a_ineq.nrows() != b_ineq.len() {
            return Err(Error::Dimension(format!(
                "A is {}x{} with b of length {}",
                a_ineq.nrows(),
                a_ineq.ncols(),
                b_ineq.len()
            )));
        }
        if n_controls > p {
            return Err(Error::Dimension("control split exceeds dimension".into()));
        }
        if h.iter().chain(c.iter()).chain(a_ineq.iter()).chain(b_ineq.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("qp data"));
        }
        let asym = (&h - h.transpose()).abs().max();
        let scale = T::one() + h.abs().max();
        if asym > lit::<T>(1e-9) * scale {
            return Err(Error::InvalidParams("H is not symmetric".into()));
        }
        // Store the exactly symmetric part so downstream factorizations are
        // deterministic in the face of tiny assembly asymmetries.
        let h = (&h + h.transpose()) * lit::<T>(0.5);
        Ok(Self { h, c, a_ineq, b_ineq, n_controls })
    }

    /// Number of decision variables.
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Number of inequality rows.
    pub fn n_constraints(&self) -> usize {
        self.b_ineq.len()
    }

    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    /// Objective value `1/2 z' H z - c' z`.
    pub fn objective(&self, z: &DVector<T>) -> T {
        let hz = &self.h * z;
        lit::<T>(0.5) * z.dot(&hz) - self.c.dot(z)
    }

    /// Componentwise KKT residuals of a primal/dual pair.
    pub fn kkt_residual(&self, z: &DVector<T>, mu: &DVector<T>) -> KktResidual<T> {
        let grad = &self.h * z - &self.c + self.a_ineq.transpose() * mu;
        let slack = &self.a_ineq * z - &self.b_ineq;
        let stationarity = grad.abs().max();
        let mut primal = T::zero();
        let mut dual = T::zero();
        let mut complementarity = T::zero();
        for i in 0..self.n_constraints() {
            primal = primal.max(slack[i]);
            dual = dual.max(-mu[i]);
            complementarity = complementarity.max((mu[i] * slack[i]).abs());
        }
        KktResidual {
            stationarity,
            primal: primal.max(T::zero()),
            dual: dual.max(T::zero()),
            complementarity,
        }
    }
}

/// The four first-order optimality residuals.
#[derive(Debug, Clone, Copy)]
pub struct KktResidual<T: Real> {
    pub stationarity: T,
    pub primal: T,
    pub dual: T,
    pub complementarity: T,
}

impl<T: Real> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Result of a QP solve. `u_seq`/`eta_seq` reflect the problem's control
/// split; for plain problems `eta_seq` is empty.
#[derive(Debug, Clone)]
pub struct QpSolution<T: Real> {
    pub u_seq: DVector<T>,
    pub eta_seq: DVector<T>,
    pub status: SolveStatus,
    /// Max of the four KKT residuals at the returned point.
    pub kkt_residual: T,
    pub iterations: usize,
    /// Objective at the returned point.
    pub objective: T,
    /// Inequality multipliers (length = number of constraint rows).
    pub multipliers: DVector<T>,
}

impl<T: Real> QpSolution<T> {
    /// Full decision vector `[u_seq; eta_seq]`.
    pub fn z(&self) -> DVector<T> {
        let mut z = DVector::zeros(self.u_seq.len() + self.eta_seq.len());
        z.rows_mut(0, self.u_seq.len()).copy_from(&self.u_seq);
        z.rows_mut(self.u_seq.len(), self.eta_seq.len())
            .copy_from(&self.eta_seq);
        z
    }

    pub(crate) fn from_parts(
        qp: &QpProblem<T>,
        z: DVector<T>,
        multipliers: DVector<T>,
        status: SolveStatus,
        iterations: usize,
    ) -> Self {
        let kkt = qp.kkt_residual(&z, &multipliers).max();
        let objective = qp.objective(&z);
        let n_u = qp.n_controls();
        let u_seq = z.rows(0, n_u).into_owned();
        let eta_seq = z.rows(n_u, z.len() - n_u).into_owned();
        Self { u_seq, eta_seq, status, kkt_residual: kkt, iterations, objective, multipliers }
    }
}
