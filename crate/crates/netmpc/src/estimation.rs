//! Controller-side estimator under sensor dropouts.
//!
//! On a delivered packet the estimator adopts the sensor's filtered state;
//! on a drop it propagates the model with the last acknowledged control:
//! `x̃_t = s_t x̂_t + (1 - s_t)(A x̃_{t-1} + B u^a_{t-1})`, together with the
//! received innovation `Ĩ_t = s_t (y_t - C x̂_t)` that feeds the policy.

use nalgebra::DVector;
use thiserror::Error;

use crate::model::SystemModel;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("packet presence must match the sensor-channel bit (s_t = {s}, packet = {packet})")]
    PacketMismatch { s: bool, packet: bool },
    #[error("estimation diagnostics need at least {min} paths, got {got}")]
    TooFewPaths { min: usize, got: usize },
}

/// Estimator state after consuming the time-t packet (or its loss).
#[derive(Debug, Clone)]
pub struct EstimatorState {
    /// `x̃_t = E[x_t | received data]`.
    pub x_tilde: DVector<f64>,
    /// `Ĩ_t`, zero when the packet was dropped.
    pub received_innovation: DVector<f64>,
    /// Sensor-channel bit for this step.
    pub delivered: bool,
}

impl EstimatorState {
    /// The `t = -1` convention: zero estimate, zero innovation.
    pub fn initial(model: &SystemModel) -> Self {
        EstimatorState {
            x_tilde: DVector::zeros(model.state_dim()),
            received_innovation: DVector::zeros(model.output_dim()),
            delivered: false,
        }
    }
}

/// Advances the estimator by one step. `packet` carries the sensor's
/// `(x̂_t, y_t)` and must be present exactly when `s_t = 1`; `u_prev` is the
/// previously applied control, known through acknowledgements.
pub fn remote_update(
    prev: &EstimatorState,
    s_t: bool,
    packet: Option<(&DVector<f64>, &DVector<f64>)>,
    u_prev: &DVector<f64>,
    model: &SystemModel,
) -> Result<EstimatorState, EstimationError> {
    if s_t != packet.is_some() {
        return Err(EstimationError::PacketMismatch { s: s_t, packet: packet.is_some() });
    }
    match packet {
        Some((x_hat, y)) => Ok(EstimatorState {
            x_tilde: x_hat.clone(),
            received_innovation: y - &model.c * x_hat,
            delivered: true,
        }),
        None => Ok(EstimatorState {
            x_tilde: &model.a * &prev.x_tilde + &model.b * u_prev,
            received_innovation: DVector::zeros(model.output_dim()),
            delivered: false,
        }),
    }
}

/// Empirical `sup_t E|x̂_t - x̃_t|²` over a set of simulated paths, the
/// boundedness diagnostic for the dropout-induced estimation error.
///
/// Each path supplies the per-step error vectors `x̂_t - x̃_t`.
pub fn estimation_error_diag(paths: &[Vec<DVector<f64>>]) -> Result<f64, EstimationError> {
    const MIN_PATHS: usize = 100;
    if paths.len() < MIN_PATHS {
        return Err(EstimationError::TooFewPaths { min: MIN_PATHS, got: paths.len() });
    }
    let horizon = paths.iter().map(|p| p.len()).min().unwrap_or(0);
    let mut sup = 0.0_f64;
    for t in 0..horizon {
        let mean: f64 =
            paths.iter().map(|p| p[t].norm_squared()).sum::<f64>() / paths.len() as f64;
        sup = sup.max(mean);
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn scalar_model(a: f64, b: f64) -> SystemModel {
        SystemModel {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, 1.0),
            sigma_w: DMatrix::from_element(1, 1, 1.0),
            sigma_meas: DMatrix::from_element(1, 1, 1.0),
            sigma_x0: DMatrix::from_element(1, 1, 1.0),
            cost_q: DMatrix::from_element(1, 1, 1.0),
            cost_qn: DMatrix::from_element(1, 1, 1.0),
            cost_r: DMatrix::from_element(1, 1, 1.0),
            u_max: 1.0,
            horizon: 2,
            recalc: 1,
        }
    }

    #[test]
    fn delivered_packet_overrides_history() {
        let model = scalar_model(3.0, -2.0);
        let prev = EstimatorState {
            x_tilde: DVector::from_element(1, 123.0),
            received_innovation: DVector::zeros(1),
            delivered: false,
        };
        let x_hat = DVector::from_element(1, 7.0);
        let y = DVector::from_element(1, 9.0);
        let next = remote_update(&prev, true, Some((&x_hat, &y)), &DVector::zeros(1), &model).unwrap();
        assert_eq!(next.x_tilde[0], 7.0);
        assert_eq!(next.received_innovation[0], 2.0);
    }

    #[test]
    fn drop_is_a_pure_hold_for_identity_dynamics() {
        let model = scalar_model(1.0, 0.0);
        let prev = EstimatorState {
            x_tilde: DVector::from_element(1, 4.5),
            received_innovation: DVector::zeros(1),
            delivered: true,
        };
        let next = remote_update(&prev, false, None, &DVector::from_element(1, 2.0), &model).unwrap();
        assert_eq!(next.x_tilde[0], 4.5);
        assert_eq!(next.received_innovation[0], 0.0);
    }

    #[test]
    fn drop_propagates_model() {
        // x̃ = A x̃_prev + B u = 2·1 + 1·3 = 5 (test-only unstable dynamics).
        let model = scalar_model(2.0, 1.0);
        let prev = EstimatorState {
            x_tilde: DVector::from_element(1, 1.0),
            received_innovation: DVector::zeros(1),
            delivered: true,
        };
        let next = remote_update(&prev, false, None, &DVector::from_element(1, 3.0), &model).unwrap();
        assert_eq!(next.x_tilde[0], 5.0);
    }

    #[test]
    fn packet_contract_is_enforced() {
        let model = scalar_model(1.0, 1.0);
        let prev = EstimatorState::initial(&model);
        let x_hat = DVector::zeros(1);
        let y = DVector::zeros(1);
        assert!(remote_update(&prev, false, Some((&x_hat, &y)), &DVector::zeros(1), &model).is_err());
        assert!(remote_update(&prev, true, None, &DVector::zeros(1), &model).is_err());
    }

    #[test]
    fn diag_needs_enough_paths_and_is_zero_without_drops() {
        let short: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(1)]; 10];
        assert!(estimation_error_diag(&short).is_err());
        let perfect: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(1); 5]; 120];
        assert_eq!(estimation_error_diag(&perfect).unwrap(), 0.0);
    }
}
