//! Self-contained dense convex QP solver for the per-step controller
//! problems (tens to a few hundred variables):
//!
//! ```text
//! minimize   ½ xᵀP x + qᵀx
//! subject to l <= A x <= u        (±∞ allowed, equalities via l = u)
//! ```
//!
//! Operator-splitting (ADMM) with over-relaxation, modified Ruiz
//! equilibration, per-row penalty with one adaptive update, and an
//! active-set KKT polish on convergence. Deterministic: identical inputs
//! produce bit-identical iterates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("P is not symmetric (defect {0:.3e})")]
    Asymmetric(f64),
    #[error("constraint bounds violate l <= u at row {0}")]
    BoundOrder(usize),
    #[error("problem data contains a non-finite entry")]
    NonFinite,
}

/// Dense convex QP data.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let k = self.num_constraints();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.a.nrows() != k || (k > 0 && self.a.ncols() != n) {
            return Err(QpError::Dimension(format!(
                "A is {}x{}, expected {k}x{n}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.u.len() != k {
            return Err(QpError::Dimension("l and u lengths differ".into()));
        }
        let defect = (&self.p - self.p.transpose()).amax();
        if defect > 1e-8 * self.p.amax().max(1.0) {
            return Err(QpError::Asymmetric(defect));
        }
        for i in 0..k {
            if self.l[i] > self.u[i] {
                return Err(QpError::BoundOrder(i));
            }
        }
        let finite = self.p.iter().all(|v| v.is_finite())
            && self.q.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.l.iter().all(|v| !v.is_nan())
            && self.u.iter().all(|v| !v.is_nan());
        if !finite {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    PrimalInfeasibleCertificate,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Dual variables of the range constraints (OSQP sign convention:
    /// positive on upper-active rows, negative on lower-active rows).
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
    /// Wall-clock seconds spent inside the solver.
    pub solve_time: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub ruiz_iters: usize,
    /// Allow the single adaptive rho update.
    pub adaptive_rho: bool,
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            ruiz_iters: 10,
            adaptive_rho: true,
            polish: true,
        }
    }
}

const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const EQ_RHO_BOOST: f64 = 1e3;
const EPS_PINF: f64 = 1e-6;
const CHECK_EVERY: usize = 10;

struct Scaling {
    /// Variable scaling, x = d ∘ x̄.
    d: DVector<f64>,
    /// Constraint scaling, z = z̄ / e.
    e: DVector<f64>,
    /// Cost scaling.
    c: f64,
}

/// Modified Ruiz equilibration on the stacked [[P, Aᵀ], [A, 0]] matrix,
/// followed by a single cost normalization.
fn equilibrate(
    p: &mut DMatrix<f64>,
    q: &mut DVector<f64>,
    a: &mut DMatrix<f64>,
    l: &mut DVector<f64>,
    u: &mut DVector<f64>,
    iters: usize,
) -> Scaling {
    let n = q.len();
    let k = l.len();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(k, 1.0);

    for _ in 0..iters {
        for j in 0..n {
            let mut norm: f64 = p.column(j).amax();
            if k > 0 {
                norm = norm.max(a.column(j).amax());
            }
            let delta = if norm > 0.0 { (1.0 / norm.sqrt()).clamp(MIN_SCALING, MAX_SCALING) } else { 1.0 };
            p.column_mut(j).scale_mut(delta);
            p.row_mut(j).scale_mut(delta);
            if k > 0 {
                a.column_mut(j).scale_mut(delta);
            }
            q[j] *= delta;
            d[j] *= delta;
        }
        for i in 0..k {
            let norm = a.row(i).amax();
            let delta = if norm > 0.0 { (1.0 / norm.sqrt()).clamp(MIN_SCALING, MAX_SCALING) } else { 1.0 };
            a.row_mut(i).scale_mut(delta);
            l[i] *= delta;
            u[i] *= delta;
            e[i] *= delta;
        }
    }

    // Cost normalization against the equilibrated quadratic/linear scale.
    let mut mean_col = 0.0;
    for j in 0..n {
        mean_col += p.column(j).amax();
    }
    mean_col /= n.max(1) as f64;
    let denom = mean_col.max(q.amax());
    let c = if denom > 0.0 { (1.0 / denom).clamp(MIN_SCALING, MAX_SCALING) } else { 1.0 };
    *p *= c;
    *q *= c;

    Scaling { d, e, c }
}

struct Workspace {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    x_tilde: DVector<f64>,
    z_tilde: DVector<f64>,
    rhs: DVector<f64>,
    ax: DVector<f64>,
    px: DVector<f64>,
    aty: DVector<f64>,
    y_prev: DVector<f64>,
}

/// Solves the QP by ADMM. Non-convergence is reported through the status,
/// not an error; errors are reserved for malformed problem data.
pub fn solve(prob: &QpProblem, opts: &SolveOptions) -> Result<QpSolution, QpError> {
    prob.validate()?;
    let start = Instant::now();
    let n = prob.num_vars();
    let k = prob.num_constraints();

    // Scaled copies.
    let mut p = (&prob.p + prob.p.transpose()) * 0.5;
    let mut q = prob.q.clone();
    let mut a = prob.a.clone();
    let mut l = prob.l.clone();
    let mut u = prob.u.clone();
    let scaling = equilibrate(&mut p, &mut q, &mut a, &mut l, &mut u, opts.ruiz_iters);

    // Per-row penalty: equalities get a stiffer rho.
    let build_rho = |rho: f64| -> DVector<f64> {
        DVector::from_fn(k, |i, _| if l[i] == u[i] { (rho * EQ_RHO_BOOST).min(1e9) } else { rho })
    };
    let mut rho = opts.rho;
    let mut rho_vec = build_rho(rho);

    let factor = |rho_vec: &DVector<f64>| {
        let mut m = p.clone();
        for i in 0..n {
            m[(i, i)] += opts.sigma;
        }
        if k > 0 {
            // M += Aᵀ diag(rho) A
            let mut ra = a.clone();
            for i in 0..k {
                ra.row_mut(i).scale_mut(rho_vec[i]);
            }
            m += a.transpose() * ra;
        }
        m.cholesky().expect("P + sigma I + rho AᵀA is positive definite")
    };
    let mut chol = factor(&rho_vec);

    let mut ws = Workspace {
        x: DVector::zeros(n),
        z: DVector::zeros(k),
        y: DVector::zeros(k),
        x_tilde: DVector::zeros(n),
        z_tilde: DVector::zeros(k),
        rhs: DVector::zeros(n),
        ax: DVector::zeros(k),
        px: DVector::zeros(n),
        aty: DVector::zeros(n),
        y_prev: DVector::zeros(k),
    };

    let mut status = QpStatus::MaxIter;
    let mut iterations = opts.max_iter;
    let mut primal_residual = f64::INFINITY;
    let mut dual_residual = f64::INFINITY;
    let mut rho_adapted = !opts.adaptive_rho;

    for iter in 1..=opts.max_iter {
        // rhs = sigma x - q + Aᵀ(rho ∘ z - y)
        ws.rhs.copy_from(&ws.x);
        ws.rhs *= opts.sigma;
        ws.rhs -= &q;
        if k > 0 {
            for i in 0..k {
                ws.y_prev[i] = rho_vec[i] * ws.z[i] - ws.y[i];
            }
            ws.rhs.gemv_tr(1.0, &a, &ws.y_prev, 1.0);
        }
        ws.x_tilde.copy_from(&ws.rhs);
        chol.solve_mut(&mut ws.x_tilde);
        if k > 0 {
            ws.z_tilde.gemv(1.0, &a, &ws.x_tilde, 0.0);
        }

        // Over-relaxed updates.
        for j in 0..n {
            ws.x[j] = opts.alpha * ws.x_tilde[j] + (1.0 - opts.alpha) * ws.x[j];
        }
        ws.y_prev.copy_from(&ws.y);
        for i in 0..k {
            let z_rel = opts.alpha * ws.z_tilde[i] + (1.0 - opts.alpha) * ws.z[i];
            let z_new = (z_rel + ws.y[i] / rho_vec[i]).clamp(l[i], u[i]);
            ws.y[i] += rho_vec[i] * (z_rel - z_new);
            ws.z[i] = z_new;
        }

        if iter % CHECK_EVERY != 0 && iter != opts.max_iter {
            continue;
        }

        // Unscaled residuals: r_p = E⁻¹(Āx̄ - z̄), r_d = D⁻¹(P̄x̄ + q̄ + Āᵀȳ)/c.
        ws.px.gemv(1.0, &p, &ws.x, 0.0);
        let mut r_dual: f64 = 0.0;
        let mut scale_dual: f64 = 0.0;
        if k > 0 {
            ws.aty.gemv_tr(1.0, &a, &ws.y, 0.0);
        } else {
            ws.aty.fill(0.0);
        }
        for j in 0..n {
            let unscale = 1.0 / (scaling.d[j] * scaling.c);
            r_dual = r_dual.max(((ws.px[j] + q[j] + ws.aty[j]) * unscale).abs());
            scale_dual = scale_dual
                .max((ws.px[j] * unscale).abs())
                .max((q[j] * unscale).abs())
                .max((ws.aty[j] * unscale).abs());
        }

        let mut r_prim: f64 = 0.0;
        let mut scale_prim: f64 = 0.0;
        if k > 0 {
            ws.ax.gemv(1.0, &a, &ws.x, 0.0);
            for i in 0..k {
                let unscale = 1.0 / scaling.e[i];
                r_prim = r_prim.max(((ws.ax[i] - ws.z[i]) * unscale).abs());
                scale_prim = scale_prim.max((ws.ax[i] * unscale).abs()).max((ws.z[i] * unscale).abs());
            }
        }

        let eps_prim = opts.eps_abs + opts.eps_rel * scale_prim;
        let eps_dual = opts.eps_abs + opts.eps_rel * scale_dual;
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = QpStatus::Optimal;
            iterations = iter;
            primal_residual = r_prim;
            dual_residual = r_dual;
            break;
        }

        // Primal infeasibility certificate from the dual increment.
        if k > 0 {
            let mut dy_norm: f64 = 0.0;
            for i in 0..k {
                dy_norm = dy_norm.max((ws.y[i] - ws.y_prev[i]).abs() / scaling.e[i] / scaling.c);
            }
            if dy_norm > EPS_PINF {
                let mut aty_dy = DVector::zeros(n);
                let dy = DVector::from_fn(k, |i, _| ws.y[i] - ws.y_prev[i]);
                aty_dy.gemv_tr(1.0, &a, &dy, 0.0);
                let at_ok = (0..n).all(|j| (aty_dy[j] / (scaling.d[j] * scaling.c)).abs() <= EPS_PINF * dy_norm);
                let mut support = 0.0;
                let mut bounded = true;
                for i in 0..k {
                    let dyi = (ws.y[i] - ws.y_prev[i]) / scaling.e[i] / scaling.c;
                    let (lo, hi) = (prob.l[i], prob.u[i]);
                    if dyi > 0.0 {
                        if hi.is_infinite() {
                            bounded = false;
                            break;
                        }
                        support += hi * dyi;
                    } else if dyi < 0.0 {
                        if lo.is_infinite() {
                            bounded = false;
                            break;
                        }
                        support += lo * dyi;
                    }
                }
                if at_ok && bounded && support <= -EPS_PINF * dy_norm {
                    status = QpStatus::PrimalInfeasibleCertificate;
                    iterations = iter;
                    primal_residual = r_prim;
                    dual_residual = r_dual;
                    break;
                }
            }
        }

        // One adaptive rho rescale when the residuals are badly unbalanced.
        if !rho_adapted && k > 0 && iter >= CHECK_EVERY {
            let rp_rel = r_prim / eps_prim.max(1e-30);
            let rd_rel = r_dual / eps_dual.max(1e-30);
            let ratio = rp_rel / rd_rel.max(1e-30);
            if ratio > 10.0 || ratio < 0.1 {
                rho = (rho * ratio.sqrt()).clamp(1e-6, 1e6);
                rho_vec = build_rho(rho);
                chol = factor(&rho_vec);
                rho_adapted = true;
            }
        }

        if iter == opts.max_iter {
            primal_residual = r_prim;
            dual_residual = r_dual;
        }
    }

    // Unscale.
    let mut x = DVector::from_fn(n, |j, _| ws.x[j] * scaling.d[j]);
    let mut y = DVector::from_fn(k, |i, _| ws.y[i] * scaling.e[i] / scaling.c);

    let mut polished = false;
    if status == QpStatus::Optimal && opts.polish {
        if let Some((xp, yp)) = polish(prob, &x, &y) {
            let (rp_new, rd_new) = residuals(prob, &xp, &yp);
            let (rp_old, rd_old) = residuals(prob, &x, &y);
            if rp_new.max(rd_new) <= rp_old.max(rd_old) {
                x = xp;
                y = yp;
                primal_residual = rp_new;
                dual_residual = rd_new;
                polished = true;
            }
        }
    }

    Ok(QpSolution {
        x,
        y,
        status,
        iterations,
        primal_residual,
        dual_residual,
        polished,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

/// Unscaled max-norm primal/dual residuals for a candidate pair.
fn residuals(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let k = prob.num_constraints();
    let mut r_prim: f64 = 0.0;
    if k > 0 {
        let ax = &prob.a * x;
        for i in 0..k {
            let viol = (ax[i] - prob.u[i]).max(prob.l[i] - ax[i]).max(0.0);
            r_prim = r_prim.max(viol);
        }
    }
    let mut grad = &prob.p * x + &prob.q;
    if k > 0 {
        grad += prob.a.transpose() * y;
    }
    (r_prim, grad.amax())
}

/// Active-set KKT polish: equality-solve on the rows the duals mark as
/// active, with tiny regularization and two refinement sweeps.
fn polish(prob: &QpProblem, _x: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.num_vars();
    let k = prob.num_constraints();
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..k {
        if y[i] < 0.0 && prob.l[i].is_finite() {
            active.push((i, prob.l[i]));
        } else if y[i] > 0.0 && prob.u[i].is_finite() {
            active.push((i, prob.u[i]));
        } else if prob.l[i] == prob.u[i] {
            active.push((i, prob.l[i]));
        }
    }
    let na = active.len();
    let dim = n + na;
    let delta = 1e-9;

    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for j in 0..n {
        kkt[(j, j)] += delta;
    }
    for (r, &(i, _)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(i, j)];
            kkt[(j, n + r)] = prob.a[(i, j)];
        }
        kkt[(n + r, n + r)] = -delta;
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -prob.q[j];
    }
    for (r, &(_, b)) in active.iter().enumerate() {
        rhs[n + r] = b;
    }

    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // Iterative refinement against the unregularized KKT system.
    let mut unreg = kkt.clone();
    for j in 0..n {
        unreg[(j, j)] -= delta;
    }
    for r in 0..na {
        unreg[(n + r, n + r)] += delta;
    }
    for _ in 0..2 {
        let resid = &rhs - &unreg * &sol;
        if let Some(corr) = lu.solve(&resid) {
            sol += corr;
        }
    }

    let xp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(k);
    for (r, &(i, _)) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    if xp.iter().all(|v| v.is_finite()) && yp.iter().all(|v| v.is_finite()) {
        Some((xp, yp))
    } else {
        None
    }
}

/// KKT residual report for a candidate primal/dual pair.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub complementary_slackness: f64,
}

pub fn check_kkt(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> KktReport {
    let (primal, stationarity) = residuals(prob, x, y);
    let k = prob.num_constraints();
    let mut comp: f64 = 0.0;
    if k > 0 {
        let ax = &prob.a * x;
        for i in 0..k {
            let y_pos = y[i].max(0.0);
            let y_neg = (-y[i]).max(0.0);
            let up = if prob.u[i].is_finite() { y_pos * (prob.u[i] - ax[i]).abs() } else { y_pos };
            let low = if prob.l[i].is_finite() { y_neg * (ax[i] - prob.l[i]).abs() } else { y_neg };
            comp = comp.max(up).max(low);
        }
    }
    KktReport {
        stationarity,
        primal_feasibility: primal,
        complementary_slackness: comp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve_default(prob: &QpProblem) -> QpSolution {
        solve(prob, &SolveOptions::default()).unwrap()
    }

    #[test]
    fn scalar_bound() {
        // min x² s.t. x >= 1 -> x = 1.
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 2.0),
            q: DVector::zeros(1),
            a: DMatrix::from_element(1, 1, 1.0),
            l: DVector::from_element(1, 1.0),
            u: DVector::from_element(1, f64::INFINITY),
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-6, "x = {}", sol.x[0]);
    }

    #[test]
    fn box_projection() {
        // min ½|x - c|², |x|_inf <= 1, c = (2, -0.5) -> x = (1, -0.5).
        let prob = QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::from_row_slice(&[-2.0, 0.5]),
            a: DMatrix::identity(2, 2),
            l: DVector::from_element(2, -1.0),
            u: DVector::from_element(2, 1.0),
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-6);
        assert!((sol.x[1] + 0.5).abs() < 1e-6);
        let report = check_kkt(&prob, &sol.x, &sol.y);
        assert!(report.stationarity < 1e-5);
        assert!(report.primal_feasibility < 1e-6);
        assert!(report.complementary_slackness < 1e-5);
    }

    #[test]
    fn unconstrained_newton_point() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let q = DVector::from_row_slice(&[-1.0, 2.0]);
        let prob = QpProblem {
            p: p.clone(),
            q: q.clone(),
            a: DMatrix::zeros(0, 2),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
        };
        let sol = solve_default(&prob);
        let expected = -p.lu().solve(&q).unwrap();
        assert!((sol.x - &expected).amax() < 1e-6);
        let report = check_kkt(&prob, &expected, &DVector::zeros(0));
        assert!(report.stationarity < 1e-12);
    }

    #[test]
    fn deterministic_replay() {
        let prob = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]),
            q: DVector::from_row_slice(&[1.0, -0.7]),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, -1.0, 0.3, 2.0]),
            l: DVector::from_row_slice(&[-1.0, -2.0, -0.5]),
            u: DVector::from_row_slice(&[1.0, 0.5, 0.8]),
        };
        let a = solve_default(&prob);
        let b = solve_default(&prob);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn scaling_robustness() {
        let base = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            q: DVector::from_row_slice(&[-1.0, -1.0]),
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            l: DVector::from_element(2, -2.0),
            u: DVector::from_element(2, 2.0),
        };
        let mut scaled = base.clone();
        scaled.p *= 1e3;
        scaled.q *= 1e3;
        let x0 = solve_default(&base).x;
        let x1 = solve_default(&scaled).x;
        assert!((x0 - x1).amax() < 1e-4);
    }

    #[test]
    fn infeasible_rows_certificate() {
        // x <= -1 and x >= 1 simultaneously.
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 1.0),
            q: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            l: DVector::from_row_slice(&[f64::NEG_INFINITY, 1.0]),
            u: DVector::from_row_slice(&[-1.0, f64::INFINITY]),
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, QpStatus::PrimalInfeasibleCertificate);
    }

    #[test]
    fn perturbed_point_fails_kkt() {
        let prob = QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::from_row_slice(&[-2.0, 0.5]),
            a: DMatrix::identity(2, 2),
            l: DVector::from_element(2, -1.0),
            u: DVector::from_element(2, 1.0),
        };
        let sol = solve_default(&prob);
        let mut x = sol.x.clone();
        x[1] += 0.1;
        let report = check_kkt(&prob, &x, &sol.y);
        assert!(report.stationarity > 1e-3);
    }

    #[test]
    fn malformed_problems_error() {
        let prob = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            q: DVector::zeros(2),
            a: DMatrix::zeros(0, 2),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
        };
        assert!(matches!(solve(&prob, &SolveOptions::default()), Err(QpError::Asymmetric(_))));

        let prob = QpProblem {
            p: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a: DMatrix::identity(1, 1),
            l: DVector::from_element(1, 2.0),
            u: DVector::from_element(1, 1.0),
        };
        assert!(matches!(solve(&prob, &SolveOptions::default()), Err(QpError::BoundOrder(0))));
    }
}
