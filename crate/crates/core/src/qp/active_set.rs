//! Dual active-set solver after Goldfarb & Idnani (1983).
//!
//! Starts from the unconstrained minimizer (hence needs no feasibility
//! phase), then adds violated constraints one at a time, maintaining the
//! factorizations `H = L L'` and `L^{-1} N_A = Q [R; 0]` through Givens
//! updates (`J = L^{-T} Q` is stored explicitly). The objective strictly
//! increases with every active-set change, which gives finite termination;
//! infeasibility is detected when a violated constraint admits no primal or
//! dual step.
//!
//! Tie-breaking is deterministic throughout: the most violated constraint is
//! chosen with smallest-index ties, and the ratio test keeps the first
//! minimizer. Identical inputs therefore produce bitwise-identical output.

use nalgebra::{DMatrix, DVector};

use super::{QpProblem, QpSolution, SolveStatus};
use crate::error::{Error, Result};
use crate::{lit, Real};

/// Solve a strictly convex QP. `tol` is the constraint-violation threshold
/// used both for termination and for the reported status; the returned
/// [`QpSolution::kkt_residual`] lets callers certify the result.
///
/// Errors: `H` not positive definite. An infeasible constraint system is not
/// an error — it is reported through `SolveStatus::Infeasible`.
pub fn solve_qp<T: Real>(qp: &QpProblem<T>, tol: T) -> Result<QpSolution<T>> {
    if !tol.is_finite() || tol <= T::zero() {
        return Err(Error::InvalidParams("tolerance must be positive".into()));
    }
    let n = qp.dim();
    let m = qp.n_constraints();
    let eps = T::default_epsilon();

    let chol = qp
        .h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("H must be positive definite".into()))?;

    // Internally the solver works in the >= convention:
    //   min 1/2 x'Gx + a0'x  s.t.  n_i' x >= bg_i
    // with G = H, a0 = -c, n_i = -A_i, bg_i = -b_i. The multipliers of the
    // two conventions coincide.
    let normals: Vec<DVector<T>> = (0..m)
        .map(|i| -qp.a_ineq.row(i).transpose())
        .collect();
    let bg: Vec<T> = (0..m).map(|i| -qp.b_ineq[i]).collect();

    // Unconstrained minimizer.
    let mut x = chol.solve(&qp.c);

    // J = L^{-T}: columns span the whole space; the first q get rotated onto
    // the active normals as constraints are added.
    let mut j = DMatrix::<T>::identity(n, n);
    let l = chol.l();
    l.transpose()
        .solve_upper_triangular_mut(&mut j)
        .then_some(())
        .ok_or_else(|| Error::InvalidParams("singular Cholesky factor".into()))?;
    let mut r = DMatrix::<T>::zeros(n, n);
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut mult: Vec<T> = Vec::with_capacity(n);

    let max_iter = 50 + 10 * (n + m);
    let mut iterations = 0usize;
    let mut status = SolveStatus::Optimal;

    'outer: loop {
        // Most violated inactive constraint, smallest index on ties.
        let mut worst = T::zero();
        let mut p = usize::MAX;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = normals[i].dot(&x) - bg[i];
            let thresh = -tol * (T::one() + bg[i].abs());
            if s < thresh && s < worst {
                worst = s;
                p = i;
            }
        }
        if p == usize::MAX {
            break 'outer; // all constraints satisfied
        }
        let np = &normals[p];
        let mut s_p = np.dot(&x) - bg[p];
        let mut u_plus = T::zero();

        loop {
            iterations += 1;
            if iterations > max_iter {
                status = SolveStatus::MaxIter;
                break 'outer;
            }
            let q = active.len();
            let d = j.transpose() * np;
            // Primal direction lives in the span of the inactive columns.
            let d2 = d.rows(q, n - q).into_owned();
            let z = j.columns(q, n - q) * &d2;
            // Dual direction: R r = d1.
            let mut rvec = DVector::<T>::zeros(q);
            if q > 0 {
                rvec.copy_from(&d.rows(0, q));
                back_substitute(&r, &mut rvec);
            }

            // Ratio test over active constraints with positive dual rate.
            let mut t1 = None;
            let mut k_drop = 0usize;
            for k in 0..q {
                if rvec[k] > eps {
                    let ratio = mult[k] / rvec[k];
                    if t1.map_or(true, |best| ratio < best) {
                        t1 = Some(ratio);
                        k_drop = k;
                    }
                }
            }

            // Step to the constraint plane, if the direction is nonzero.
            let ztn = d2.norm_squared();
            let zero2 = (eps * lit::<T>(100.0)).powi(2) * (T::one() + d.norm_squared());
            let t2 = if ztn > zero2 { Some(-s_p / ztn) } else { None };

            match (t1, t2) {
                (None, None) => {
                    // No dual relief and no primal progress possible: the
                    // violated constraint is inconsistent with the active set.
                    status = SolveStatus::Infeasible;
                    break 'outer;
                }
                (Some(t), None) => {
                    // Dual-only step: shrink blocking multiplier, drop it.
                    for k in 0..q {
                        mult[k] -= t * rvec[k];
                    }
                    u_plus += t;
                    drop_constraint(&mut active, &mut mult, &mut r, &mut j, k_drop);
                    continue;
                }
                (t1_opt, Some(t2v)) => {
                    let (t, full) = match t1_opt {
                        Some(t1v) if t1v < t2v => (t1v, false),
                        _ => (t2v, true),
                    };
                    x += &z * t;
                    for k in 0..q {
                        mult[k] -= t * rvec[k];
                    }
                    u_plus += t;
                    if full {
                        mult.push(u_plus);
                        add_constraint(&mut active, &mut r, &mut j, p, d);
                        break;
                    }
                    drop_constraint(&mut active, &mut mult, &mut r, &mut j, k_drop);
                    s_p = np.dot(&x) - bg[p];
                }
            }
        }
    }

    let mut mu = DVector::<T>::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        mu[i] = mult[k];
    }

    if status == SolveStatus::Optimal && !active.is_empty() {
        // Re-solve the equality-constrained problem on the final active set
        // from the original data; keep whichever point certifies better.
        if let Some((xp, mup)) = polish(qp, &chol, &active) {
            let before = qp.kkt_residual(&x, &mu).max();
            let after = qp.kkt_residual(&xp, &mup).max();
            if after < before {
                x = xp;
                mu = mup;
            }
        }
    }

    Ok(QpSolution::from_parts(qp, x, mu, status, iterations))
}

/// Solve `R y = d` in place for upper-triangular `R` (leading `len(y)` block).
fn back_substitute<T: Real>(r: &DMatrix<T>, y: &mut DVector<T>) {
    let q = y.len();
    for i in (0..q).rev() {
        let mut acc = y[i];
        for k in i + 1..q {
            acc -= r[(i, k)] * y[k];
        }
        y[i] = acc / r[(i, i)];
    }
}

/// Append constraint `p` whose rotated normal image is `d`: zero the tail of
/// `d` into position `q` with Givens rotations mirrored onto the columns of
/// `J`, then store the new column of `R`.
fn add_constraint<T: Real>(
    active: &mut Vec<usize>,
    r: &mut DMatrix<T>,
    j: &mut DMatrix<T>,
    p: usize,
    mut d: DVector<T>,
) {
    let n = j.nrows();
    let q = active.len();
    for i in (q + 1..n).rev() {
        let (c, s, rho) = givens(d[i - 1], d[i]);
        d[i - 1] = rho;
        d[i] = T::zero();
        rotate_columns(j, i - 1, i, c, s);
    }
    for k in 0..=q {
        r[(k, q)] = d[k];
    }
    active.push(p);
}

/// Remove the active constraint at position `k`: shift the trailing columns
/// of `R` left and re-triangularize, mirroring each row rotation onto the
/// columns of `J`.
fn drop_constraint<T: Real>(
    active: &mut Vec<usize>,
    mult: &mut Vec<T>,
    r: &mut DMatrix<T>,
    j: &mut DMatrix<T>,
    k: usize,
) {
    let q = active.len();
    active.remove(k);
    mult.remove(k);
    for col in k..q - 1 {
        for row in 0..=col + 1 {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for col in 0..q - 1 {
        r[(q - 1, col)] = T::zero();
    }
    for i in k..q - 1 {
        let (c, s, rho) = givens(r[(i, i)], r[(i + 1, i)]);
        if s == T::zero() {
            continue;
        }
        r[(i, i)] = rho;
        r[(i + 1, i)] = T::zero();
        for col in i + 1..q - 1 {
            let a = r[(i, col)];
            let b = r[(i + 1, col)];
            r[(i, col)] = c * a + s * b;
            r[(i + 1, col)] = -s * a + c * b;
        }
        rotate_columns(j, i, i + 1, c, s);
    }
}

/// Rotation (c, s) with [c s; -s c] [a; b] = [rho; 0].
fn givens<T: Real>(a: T, b: T) -> (T, T, T) {
    if b == T::zero() {
        return (T::one(), T::zero(), a);
    }
    let rho = (a * a + b * b).sqrt();
    (a / rho, b / rho, rho)
}

fn rotate_columns<T: Real>(j: &mut DMatrix<T>, c1: usize, c2: usize, c: T, s: T) {
    for row in 0..j.nrows() {
        let a = j[(row, c1)];
        let b = j[(row, c2)];
        j[(row, c1)] = c * a + s * b;
        j[(row, c2)] = -s * a + c * b;
    }
}

/// Exact equality-constrained re-solve on the final active set via the Schur
/// complement of the KKT system. Returns `None` when the active normals have
/// become numerically dependent.
fn polish<T: Real>(
    qp: &QpProblem<T>,
    chol: &nalgebra::Cholesky<T, nalgebra::Dyn>,
    active: &[usize],
) -> Option<(DVector<T>, DVector<T>)> {
    let q = active.len();
    let n = qp.dim();
    let mut aw = DMatrix::<T>::zeros(q, n);
    let mut bw = DVector::<T>::zeros(q);
    for (k, &i) in active.iter().enumerate() {
        aw.row_mut(k).copy_from(&qp.a_ineq.row(i));
        bw[k] = qp.b_ineq[i];
    }
    let hinv_awt = chol.solve(&aw.transpose());
    let schur = &aw * &hinv_awt;
    let rhs = &aw * chol.solve(&qp.c) - &bw;
    let mu_w = schur.cholesky()?.solve(&rhs);
    if mu_w.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = chol.solve(&(&qp.c - aw.transpose() * &mu_w));
    let mut mu = DVector::<T>::zeros(qp.n_constraints());
    for (k, &i) in active.iter().enumerate() {
        mu[i] = mu_w[k];
    }
    Some((x, mu))
}
