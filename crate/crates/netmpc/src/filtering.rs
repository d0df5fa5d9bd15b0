//! The smart sensor's Kalman filter: per-step predict/update recursions,
//! the steady-state gain used by offline moment estimation, and the
//! stacked innovation representation over one optimization horizon.
//!
//! Throughout, the innovation is measured against the *filtered* state,
//! `I_t = y_t - C x̂_{t|t}`, and the filter-error propagation matrices are
//! `phi_t = (I - K_t C) A` and `gamma_t = I - K_t C`. These are the unique
//! choices under which the stacked identity
//! `I_{t:N+1} = C_stack F e_t + O w_{t:N} + (I - C_stack H) v_{t:N+1}`
//! reproduces the step-by-step recursions; the crate's property tests pin
//! them down.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::SystemModel;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("innovation covariance is numerically singular")]
    SingularInnovationCovariance,
    #[error("Riccati iteration did not converge within {0} iterations")]
    RiccatiDiverged(usize),
    #[error("expected {expected} Kalman gains, got {got}")]
    GainCount { expected: usize, got: usize },
}

/// Filtered mean and covariance `(x̂_{t|t}, P_{t|t})`.
#[derive(Debug, Clone)]
pub struct KalmanState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Gain for a given prediction covariance:
/// `K = P C' (C P C' + sigma_meas)^-1`.
///
/// A singular innovation covariance falls back to the pseudo-inverse, with
/// the exactly-zero case (no uncertainty anywhere) yielding `K = 0`; an
/// inconsistent singular system is reported as an error.
fn gain_from_prediction(
    p_pred: &DMatrix<f64>,
    model: &SystemModel,
) -> Result<DMatrix<f64>, FilterError> {
    let s = symmetrize(&(&model.c * p_pred * model.c.transpose() + &model.sigma_meas));
    let pct = p_pred * model.c.transpose();
    match s.clone().cholesky() {
        Some(chol) => {
            // K S = P C'  =>  K' = S^-1 (P C')'.
            let kt = chol.solve(&pct.transpose());
            Ok(kt.transpose())
        }
        None => {
            if s.amax() == 0.0 && pct.amax() == 0.0 {
                return Ok(DMatrix::zeros(p_pred.nrows(), model.output_dim()));
            }
            let pinv = crate::model::pseudo_inverse(&s);
            let k = &pct * &pinv;
            let residual = (&k * &s - &pct).amax();
            if residual > 1e-8 * pct.amax().max(1.0) {
                return Err(FilterError::SingularInnovationCovariance);
            }
            Ok(k)
        }
    }
}

/// Filter initialization at t = 0 from the first measurement:
/// `x̂_{0|-1} = 0`, `P_{0|-1} = sigma_x0`, so `x̂_0 = K_0 y_0`.
pub fn initialize(model: &SystemModel, y0: &DVector<f64>) -> Result<(KalmanState, DVector<f64>), FilterError> {
    let k0 = gain_from_prediction(&model.sigma_x0, model)?;
    let x_hat = &k0 * y0;
    let p = symmetrize(&(&model.sigma_x0 - &k0 * &model.c * &model.sigma_x0));
    let innovation = y0 - &model.c * &x_hat;
    Ok((KalmanState { x_hat, p }, innovation))
}

/// One predict/update cycle. Consumes the applied control `u_t` and the
/// next measurement `y_{t+1}`; returns the new state and the innovation
/// `I_{t+1} = y_{t+1} - C x̂_{t+1|t+1}`.
pub fn predict_update(
    state: &KalmanState,
    u_applied: &DVector<f64>,
    y_next: &DVector<f64>,
    model: &SystemModel,
) -> Result<(KalmanState, DVector<f64>), FilterError> {
    let x_pred = &model.a * &state.x_hat + &model.b * u_applied;
    let p_pred = symmetrize(&(&model.a * &state.p * model.a.transpose() + &model.sigma_w));
    let k = gain_from_prediction(&p_pred, model)?;
    let x_hat = &x_pred + &k * (y_next - &model.c * &x_pred);
    let p = symmetrize(&(&p_pred - &k * &model.c * &p_pred));
    let innovation = y_next - &model.c * &x_hat;
    Ok((KalmanState { x_hat, p }, innovation))
}

/// Fixed point of the prediction-covariance Riccati iteration, returned as
/// `(K_inf, P_inf)` with `P_inf` the steady-state *prediction* covariance.
pub fn steady_state_gain(model: &SystemModel) -> Result<(DMatrix<f64>, DMatrix<f64>), FilterError> {
    const MAX_ITER: usize = 100_000;
    let mut p_pred = symmetrize(&(&model.a * &model.sigma_x0 * model.a.transpose() + &model.sigma_w));
    for _ in 0..MAX_ITER {
        let k = gain_from_prediction(&p_pred, model)?;
        let p_filt = symmetrize(&(&p_pred - &k * &model.c * &p_pred));
        let next = symmetrize(&(&model.a * &p_filt * model.a.transpose() + &model.sigma_w));
        let delta = (&next - &p_pred).amax();
        let scale = p_pred.amax().max(1e-30);
        p_pred = next;
        if delta <= 1e-10 * scale.max(1.0) {
            let k = gain_from_prediction(&p_pred, model)?;
            return Ok((k, p_pred));
        }
    }
    Err(FilterError::RiccatiDiverged(MAX_ITER))
}

/// Steady-state *filtered* covariance `P_inf - K_inf C P_inf`, the
/// stationary covariance of the filter error process.
pub fn steady_state_filtered_cov(model: &SystemModel) -> Result<DMatrix<f64>, FilterError> {
    let (k, p_pred) = steady_state_gain(model)?;
    Ok(symmetrize(&(&p_pred - &k * &model.c * &p_pred)))
}

/// Stacked innovation representation over one horizon:
/// `I_{t:N+1} = c_f · e_t + o · w_{t:N} + (I - c_stack · h) · v_{t:N+1}`
/// where `c_f = c_stack · f`.
///
/// `f` is `(N+1)d × d`, `o` is `(N+1)q × Nd` (the C factor folded in) and
/// `h` is `(N+1)d × (N+1)q`.
#[derive(Debug, Clone)]
pub struct InnovationStack {
    pub f: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

/// Assembles the stack from the `N+1` gains `K_t ... K_{t+N}` (a steady
/// state gain replicated N+1 times in practice). Gain `k` enters through
/// `phi_{t+k} = (I - K_{t+k} C) A` and `gamma_{t+k} = I - K_{t+k} C`.
pub fn build_innovation_stack(
    gains: &[DMatrix<f64>],
    model: &SystemModel,
) -> Result<InnovationStack, FilterError> {
    let n = model.horizon;
    if gains.len() != n + 1 {
        return Err(FilterError::GainCount { expected: n + 1, got: gains.len() });
    }
    let d = model.state_dim();
    let q = model.output_dim();
    let eye = DMatrix::identity(d, d);

    let phis: Vec<DMatrix<f64>> = gains.iter().map(|k| (&eye - k * &model.c) * &model.a).collect();
    let gammas: Vec<DMatrix<f64>> = gains.iter().map(|k| &eye - k * &model.c).collect();

    // Cumulative products phi_{t+k-1} ... phi_t for the F column.
    let mut f = DMatrix::zeros((n + 1) * d, d);
    let mut cum = eye.clone();
    f.view_mut((0, 0), (d, d)).copy_from(&cum);
    for k in 1..=n {
        cum = &phis[k - 1] * &cum;
        f.view_mut((k * d, 0), (d, d)).copy_from(&cum);
    }

    // o_raw block (k, j) = phi_{t+k-1} ... phi_{t+j+1} gamma_{t+j}, j < k.
    let mut o_raw = DMatrix::zeros((n + 1) * d, n * d);
    // h block (k, j') = phi_{t+k-1} ... phi_{t+j'} K_{t+j'-1}, 1 <= j' <= k.
    let mut h = DMatrix::zeros((n + 1) * d, (n + 1) * q);
    for k in 1..=n {
        let mut prod = eye.clone();
        // Walk j from k-1 down to 0, extending the phi product on the left.
        for j in (0..k).rev() {
            let blk_o = &prod * &gammas[j];
            o_raw.view_mut((k * d, j * d), (d, d)).copy_from(&blk_o);
            let blk_h = &prod * gains[j].clone();
            h.view_mut((k * d, (j + 1) * q), (d, q)).copy_from(&blk_h);
            if j > 0 {
                prod = &prod * &phis[j];
            }
        }
    }

    // Fold the output map into O so the identity reads in innovation space.
    let mut c_stack = DMatrix::zeros((n + 1) * q, (n + 1) * d);
    for k in 0..=n {
        c_stack.view_mut((k * q, k * d), (q, d)).copy_from(&model.c);
    }
    let o = &c_stack * &o_raw;

    Ok(InnovationStack { f, o, h })
}

impl InnovationStack {
    /// Evaluates the right-hand side of the stacked identity for given
    /// window noise; used by tests and the moment-estimation cross-checks.
    pub fn innovations(
        &self,
        model: &SystemModel,
        e_t: &DVector<f64>,
        w_window: &DVector<f64>,
        v_window: &DVector<f64>,
    ) -> DVector<f64> {
        let n = model.horizon;
        let d = model.state_dim();
        let q = model.output_dim();
        let mut c_stack = DMatrix::zeros((n + 1) * q, (n + 1) * d);
        for k in 0..=n {
            c_stack.view_mut((k * q, k * d), (q, d)).copy_from(&model.c);
        }
        let ce = &c_stack * (&self.f * e_t);
        let ow = if n > 0 { &self.o * w_window } else { DVector::zeros((n + 1) * q) };
        let hv = &c_stack * (&self.h * v_window);
        ce + ow + (v_window - hv)
    }
}
