//! The affine saturated received-innovation feedback policy, its
//! hard-constraint row form, the actuator-side transmission protocol with
//! its buffer, and the constructive fallback saturation policy.
//!
//! Policy structure variants (dense, zero and block-diagonal feedback
//! gain) and saturators are both runtime-selectable strategies; the CLI
//! picks them by name.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{pseudo_inverse, sigma_max, Decomposition};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy parameters violate the feasibility rows (worst margin {0:.3e})")]
    Infeasible(f64),
    #[error("window step {ell} reached the recalculation interval {n_r}")]
    WindowOverrun { ell: usize, n_r: usize },
    #[error("eta tail holds {got} blocks, expected {expected}")]
    TailLength { expected: usize, got: usize },
    #[error("drift gain zeta = {zeta} outside (0, {max}]")]
    ZetaOutOfRange { zeta: f64, max: f64 },
    #[error("unknown saturator `{0}` (expected sigmoid or clamp)")]
    UnknownSaturator(String),
    #[error("{0}")]
    Shape(String),
}

/// Componentwise odd, bounded nonlinearity applied to received innovations.
pub trait Saturator: Send + Sync {
    fn eval(&self, xi: f64) -> f64;
    /// Supremum of |eval|.
    fn psi_max(&self) -> f64;
    fn name(&self) -> &'static str;

    fn eval_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        v.map(|x| self.eval(x))
    }
}

/// `(1 - e^{-x}) / (1 + e^{-x})`, bounded by 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sigmoid;

/// Numerically stable sigmoidal saturation; exactly ±1 beyond |x| > 30 to
/// machine precision.
pub fn sigmoid(xi: f64) -> f64 {
    if xi >= 0.0 {
        let e = (-xi).exp();
        (1.0 - e) / (1.0 + e)
    } else {
        let e = xi.exp();
        (e - 1.0) / (e + 1.0)
    }
}

impl Saturator for Sigmoid {
    fn eval(&self, xi: f64) -> f64 {
        sigmoid(xi)
    }

    fn psi_max(&self) -> f64 {
        1.0
    }

    fn name(&self) -> &'static str {
        "sigmoid"
    }
}

/// Hard clamp to `[-limit, limit]`.
#[derive(Debug, Clone, Copy)]
pub struct Clamp {
    pub limit: f64,
}

impl Saturator for Clamp {
    fn eval(&self, xi: f64) -> f64 {
        xi.clamp(-self.limit, self.limit)
    }

    fn psi_max(&self) -> f64 {
        self.limit
    }

    fn name(&self) -> &'static str {
        "clamp"
    }
}

/// Saturator registry; `psi_max` only applies to the clamp.
pub fn saturator_by_name(name: &str, psi_max: f64) -> Result<Box<dyn Saturator>, PolicyError> {
    match name {
        "sigmoid" => Ok(Box::new(Sigmoid)),
        "clamp" => Ok(Box::new(Clamp { limit: psi_max })),
        other => Err(PolicyError::UnknownSaturator(other.to_string())),
    }
}

/// Structure of the feedback gain: dense lower-triangular, absent, or
/// block-diagonal (one causal feedback term per stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaVariant {
    Full,
    Zero,
    Diagonal,
}

impl ThetaVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ThetaVariant::Full => "full",
            ThetaVariant::Zero => "zero",
            ThetaVariant::Diagonal => "diagonal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(ThetaVariant::Full),
            "zero" => Some(ThetaVariant::Zero),
            "diagonal" => Some(ThetaVariant::Diagonal),
            _ => None,
        }
    }

    /// Free (row-block, col-block) coordinates of the gain for horizon `n`,
    /// in deterministic order.
    pub fn free_blocks(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        match self {
            ThetaVariant::Zero => {}
            ThetaVariant::Diagonal => {
                for ell in 0..n {
                    out.push((ell, ell));
                }
            }
            ThetaVariant::Full => {
                for ell in 0..n {
                    for i in 0..=ell {
                        out.push((ell, i));
                    }
                }
            }
        }
        out
    }
}

/// Decision variables of one optimization instant: the nominal plan `eta`
/// (length `N·m`) and the block lower-triangular innovation gain `theta`
/// (`N·m × N·q`, blocks above the diagonal structurally zero).
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub eta: DVector<f64>,
    pub theta: DMatrix<f64>,
    pub variant: ThetaVariant,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl PolicyParams {
    pub fn zeros(n: usize, m: usize, q: usize, variant: ThetaVariant) -> Self {
        PolicyParams {
            eta: DVector::zeros(n * m),
            theta: DMatrix::zeros(n * m, n * q),
            variant,
            input_dim: m,
            output_dim: q,
        }
    }

    pub fn horizon(&self) -> usize {
        self.eta.len() / self.input_dim
    }

    pub fn eta_block(&self, ell: usize) -> DVector<f64> {
        let m = self.input_dim;
        self.eta.rows(ell * m, m).into_owned()
    }

    pub fn theta_block(&self, ell: usize, i: usize) -> DMatrix<f64> {
        let (m, q) = (self.input_dim, self.output_dim);
        self.theta.view((ell * m, i * q), (m, q)).into_owned()
    }
}

/// Per-row feasibility margins `u_max - |eta_i| - psi_max · |theta row i|_1`.
/// All nonnegative iff the hard control bound holds for every realization.
pub fn feasibility_rows(params: &PolicyParams, psi_max: f64, u_max: f64) -> DVector<f64> {
    let rows = params.eta.len();
    DVector::from_fn(rows, |i, _| {
        let l1: f64 = params.theta.row(i).iter().map(|x| x.abs()).sum();
        u_max - params.eta[i].abs() - psi_max * l1
    })
}

/// Evaluates `u_{t:N} = eta + theta · psi(innovations)`. The innovation
/// list carries one q-vector per stage (zero where dropped, zero for
/// not-yet-observed stages). Parameters are checked against the
/// feasibility rows first, so the result respects the hard bound.
pub fn evaluate(
    params: &PolicyParams,
    innovations: &[DVector<f64>],
    sat: &dyn Saturator,
    u_max: f64,
) -> Result<DVector<f64>, PolicyError> {
    let n = params.horizon();
    if innovations.len() != n {
        return Err(PolicyError::Shape(format!(
            "expected {n} innovation blocks, got {}",
            innovations.len()
        )));
    }
    let worst = feasibility_rows(params, sat.psi_max(), u_max).min();
    if worst < -1e-7 {
        return Err(PolicyError::Infeasible(worst));
    }
    let q = params.output_dim;
    let mut psi = DVector::zeros(n * q);
    for (k, innov) in innovations.iter().enumerate() {
        psi.rows_mut(k * q, q).copy_from(&sat.eval_vec(innov));
    }
    Ok(&params.eta + &params.theta * psi)
}

/// Actuator-side buffer of the transmission protocol. Holds the nominal
/// tail `eta_{t+ell+1} .. eta_{t+N_r-1}` once any packet of the current
/// window has been delivered.
#[derive(Debug, Clone, Default)]
pub struct ActuatorBuffer {
    /// Tail blocks indexed by window step; `contents[ell]` is `eta_{t+ell}`.
    contents: Option<Vec<DVector<f64>>>,
    /// Cumulative delivery bit g within the window.
    delivered: bool,
}

impl ActuatorBuffer {
    /// Emptied at the start of each optimization window.
    pub fn empty() -> Self {
        ActuatorBuffer { contents: None, delivered: false }
    }

    pub fn delivered(&self) -> bool {
        self.delivered
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_none()
    }
}

/// One actuator step of the transmission protocol.
///
/// On delivery the fresh command is applied and, if this was the window's
/// first delivery, the transmitted nominal tail is stored. On a drop the
/// buffered `eta_{t+ell}` is applied when present, otherwise null control.
/// `eta_tail` lists `eta_{t+ell+1} .. eta_{t+N_r-1}`.
pub fn protocol_step(
    buffer: &mut ActuatorBuffer,
    nu: bool,
    ell: usize,
    u_transmitted: &DVector<f64>,
    eta_tail: &[DVector<f64>],
    n_r: usize,
) -> Result<DVector<f64>, PolicyError> {
    if ell >= n_r {
        return Err(PolicyError::WindowOverrun { ell, n_r });
    }
    if eta_tail.len() != n_r - 1 - ell {
        return Err(PolicyError::TailLength { expected: n_r - 1 - ell, got: eta_tail.len() });
    }
    if nu {
        if buffer.contents.is_none() {
            let mut stored = vec![DVector::zeros(u_transmitted.len()); ell + 1];
            stored.extend(eta_tail.iter().cloned());
            buffer.contents = Some(stored);
        }
        buffer.delivered = true;
        Ok(u_transmitted.clone())
    } else {
        match &buffer.contents {
            Some(stored) => Ok(stored[ell].clone()),
            None => Ok(DVector::zeros(u_transmitted.len())),
        }
    }
}

/// Realized delivery matrices of the compact plant-input form
/// `u^a_{t:N} = G eta + S theta psi`:
/// `S = blkdiag(nu_t I, ..., nu_{t+N_r-1} I, I)` and `G` diagonal with the
/// cumulative-delivery bits `g` on the first `N_r` blocks.
pub fn build_g_s(nu: &[bool], n_r: usize, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    assert!(nu.len() >= n_r, "need {n_r} delivery bits, got {}", nu.len());
    let mut g = DMatrix::zeros(n * m, n * m);
    let mut s = DMatrix::zeros(n * m, n * m);
    let mut gbit = false;
    for i in 0..n {
        let (gv, sv) = if i < n_r {
            gbit = gbit || nu[i];
            (gbit, nu[i])
        } else {
            (true, true)
        };
        for r in 0..m {
            g[(i * m + r, i * m + r)] = if gv { 1.0 } else { 0.0 };
            s[(i * m + r, i * m + r)] = if sv { 1.0 } else { 0.0 };
        }
    }
    (g, s)
}

/// Componentwise saturation with linear zone `[-r, r]` and plateau `zeta`.
pub fn sat_infty(z: &DVector<f64>, r: f64, zeta: f64) -> DVector<f64> {
    z.map(|zi| {
        if zi.abs() <= r {
            zi * zeta / r
        } else if zi > r {
            zeta
        } else {
            -zeta
        }
    })
}

/// Largest admissible drift gain `u_max / (sqrt(d_o) · σ₁(R_κ†))`.
pub fn zeta_upper_bound(dec: &Decomposition, u_max: f64) -> f64 {
    if dec.orth_dim() == 0 {
        return f64::INFINITY;
    }
    let reach = crate::model::reachability_matrix(&dec.a_orth, &dec.b_orth, dec.kappa)
        .expect("kappa >= 1 for a nonempty orthogonal part");
    u_max / ((dec.orth_dim() as f64).sqrt() * sigma_max(&pseudo_inverse(&reach)))
}

/// Constructive drift-satisfying control for one window:
/// `eta_{1:κm} = -R_κ† · A_o^{t+κ} · sat_{r,ζ}((A_oᵀ)^t x̃_o)`.
///
/// `a_orth_pow_t` is `A_o^t` for the absolute time `t` of the window start.
/// The result is bounded by `u_max` in the sup norm by the admissible
/// range of `zeta`.
pub fn fallback_saturation_policy_pow(
    x_orth: &DVector<f64>,
    a_orth_pow_t: &DMatrix<f64>,
    dec: &Decomposition,
    r: f64,
    zeta: f64,
    u_max: f64,
) -> Result<DVector<f64>, PolicyError> {
    let zeta_max = zeta_upper_bound(dec, u_max);
    if !(zeta > 0.0 && zeta <= zeta_max * (1.0 + 1e-12)) {
        return Err(PolicyError::ZetaOutOfRange { zeta, max: zeta_max });
    }
    let reach = crate::model::reachability_matrix(&dec.a_orth, &dec.b_orth, dec.kappa)
        .map_err(|e| PolicyError::Shape(e.to_string()))?;
    let z = a_orth_pow_t.transpose() * x_orth;
    let target = sat_infty(&z, r, zeta);
    let a_pow_t_k = a_orth_pow_t * power(&dec.a_orth, dec.kappa);
    Ok(-(pseudo_inverse(&reach) * (a_pow_t_k * target)))
}

/// [`fallback_saturation_policy_pow`] with `A_o^t` computed by repeated
/// multiplication (fine for tests and moderate `t`; the simulator keeps an
/// incrementally re-orthogonalized power instead).
pub fn fallback_saturation_policy(
    x_orth: &DVector<f64>,
    t_abs: usize,
    dec: &Decomposition,
    r: f64,
    zeta: f64,
    u_max: f64,
) -> Result<DVector<f64>, PolicyError> {
    let pow = power(&dec.a_orth, t_abs);
    fallback_saturation_policy_pow(x_orth, &pow, dec, r, zeta, u_max)
}

pub fn power(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Incrementally maintained power of an orthogonal matrix with periodic QR
/// re-orthogonalization so long runs do not drift.
#[derive(Debug, Clone)]
pub struct OrthPowerTracker {
    base: DMatrix<f64>,
    pow: DMatrix<f64>,
    pub exponent: usize,
    steps_since_qr: usize,
}

impl OrthPowerTracker {
    const REORTH_EVERY: usize = 1000;

    pub fn new(a_orth: DMatrix<f64>) -> Self {
        let n = a_orth.nrows();
        OrthPowerTracker { base: a_orth, pow: DMatrix::identity(n, n), exponent: 0, steps_since_qr: 0 }
    }

    /// Current `A_o^t`.
    pub fn value(&self) -> &DMatrix<f64> {
        &self.pow
    }

    pub fn advance(&mut self, steps: usize) {
        for _ in 0..steps {
            self.pow = &self.pow * &self.base;
        }
        self.exponent += steps;
        self.steps_since_qr += steps;
        if self.steps_since_qr >= Self::REORTH_EVERY && self.pow.nrows() > 0 {
            let qr = self.pow.clone().qr();
            let q = qr.q();
            let r = qr.r();
            // Fix column signs so Q stays next to the drifted power.
            let mut fixed = q;
            for j in 0..r.ncols().min(fixed.ncols()) {
                if r[(j, j)] < 0.0 {
                    fixed.column_mut(j).neg_mut();
                }
            }
            self.pow = fixed;
            self.steps_since_qr = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decompose, reference, BlockForm};

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.0);
        assert!((sigmoid(3.0_f64.ln()) - 0.5).abs() < 1e-15);
        assert!((sigmoid(1e3) - 1.0).abs() < 1e-15);
        assert!((sigmoid(-1e3) + 1.0).abs() < 1e-15);
        assert_eq!(sigmoid(40.0), 1.0);
        // Odd function.
        for x in [0.1, 0.7, 2.5, 31.0] {
            assert_eq!(sigmoid(-x), -sigmoid(x));
        }
    }

    #[test]
    fn evaluate_examples() {
        // m = q = N = 1, eta = 0.5, theta = 0.3, innovation ln 3, sigmoid:
        // u = 0.5 + 0.3 · 0.5 = 0.65.
        let mut params = PolicyParams::zeros(1, 1, 1, ThetaVariant::Full);
        params.eta[0] = 0.5;
        params.theta[(0, 0)] = 0.3;
        let u = evaluate(&params, &[DVector::from_element(1, 3.0_f64.ln())], &Sigmoid, 1.0).unwrap();
        assert!((u[0] - 0.65).abs() < 1e-15);

        // theta = 0 reduces to eta; zero innovations likewise.
        let mut open_loop = PolicyParams::zeros(2, 1, 1, ThetaVariant::Zero);
        open_loop.eta[0] = 0.4;
        open_loop.eta[1] = -0.2;
        let innov = vec![DVector::from_element(1, 5.0), DVector::from_element(1, -5.0)];
        let u = evaluate(&open_loop, &innov, &Sigmoid, 1.0).unwrap();
        assert_eq!(u, open_loop.eta);
    }

    #[test]
    fn feasibility_row_margins() {
        let mut params = PolicyParams::zeros(1, 2, 2, ThetaVariant::Full);
        params.eta[0] = 1.0;
        params.theta[(0, 0)] = 0.5;
        params.theta[(0, 1)] = -0.5;
        let margins = feasibility_rows(&params, 1.0, 2.1);
        assert!((margins[0] - 0.1).abs() < 1e-15);
        assert!((margins[1] - 2.1).abs() < 1e-15);

        params.eta[1] = 2.1;
        params.theta[(1, 0)] = 0.1;
        let margins = feasibility_rows(&params, 1.0, 2.1);
        assert!(margins[1] < 0.0);
    }

    #[test]
    fn protocol_trace_0_1_0() {
        // nu pattern (0, 1, 0) over N_r = 3 applies (0, u_1, eta_2).
        let n_r = 3;
        let eta: Vec<DVector<f64>> =
            (0..3).map(|k| DVector::from_element(1, 10.0 + k as f64)).collect();
        let u: Vec<DVector<f64>> =
            (0..3).map(|k| DVector::from_element(1, 20.0 + k as f64)).collect();
        let mut buffer = ActuatorBuffer::empty();
        let applied0 = protocol_step(&mut buffer, false, 0, &u[0], &eta[1..3], n_r).unwrap();
        assert_eq!(applied0[0], 0.0);
        assert!(buffer.is_empty() && !buffer.delivered());
        let applied1 = protocol_step(&mut buffer, true, 1, &u[1], &eta[2..3], n_r).unwrap();
        assert_eq!(applied1[0], 21.0);
        assert!(!buffer.is_empty() && buffer.delivered());
        let applied2 = protocol_step(&mut buffer, false, 2, &u[2], &[], n_r).unwrap();
        assert_eq!(applied2[0], 12.0);
        assert!(protocol_step(&mut buffer, true, 3, &u[2], &[], n_r).is_err());
    }

    #[test]
    fn g_s_patterns() {
        let (g, s) = build_g_s(&[true, true, true], 3, 5, 1);
        assert!((g - DMatrix::identity(5, 5)).amax() < 1e-15);
        assert!((s - DMatrix::identity(5, 5)).amax() < 1e-15);

        let (g, s) = build_g_s(&[false, false, false], 3, 5, 1);
        for i in 0..3 {
            assert_eq!(g[(i, i)], 0.0);
            assert_eq!(s[(i, i)], 0.0);
        }
        for i in 3..5 {
            assert_eq!(g[(i, i)], 1.0);
            assert_eq!(s[(i, i)], 1.0);
        }

        let (g, _) = build_g_s(&[false, true, false], 3, 5, 1);
        assert_eq!((g[(0, 0)], g[(1, 1)], g[(2, 2)]), (0.0, 1.0, 1.0));
    }

    /// For every delivery pattern over one window, the per-step protocol
    /// trace of the nominal part equals the G blocks and the feedback part
    /// application matches the S blocks exactly.
    #[test]
    fn protocol_matches_compact_form_for_all_patterns() {
        let (n, n_r, m) = (5usize, 3usize, 2usize);
        let eta: Vec<DVector<f64>> = (0..n)
            .map(|k| DVector::from_fn(m, |r, _| (k * m + r) as f64 + 1.0))
            .collect();
        let feedback: Vec<DVector<f64>> = (0..n)
            .map(|k| DVector::from_fn(m, |r, _| 100.0 + (k * m + r) as f64))
            .collect();
        for pattern in 0..(1u32 << n_r) {
            let nu: Vec<bool> = (0..n_r).map(|i| pattern & (1 << i) != 0).collect();
            let (g, s) = build_g_s(&nu, n_r, n, m);
            let mut eta_stack = DVector::zeros(n * m);
            let mut fb_stack = DVector::zeros(n * m);
            for k in 0..n {
                eta_stack.rows_mut(k * m, m).copy_from(&eta[k]);
                fb_stack.rows_mut(k * m, m).copy_from(&feedback[k]);
            }
            let compact = &g * &eta_stack + &s * &fb_stack;

            let mut buffer = ActuatorBuffer::empty();
            for ell in 0..n_r {
                let u_fresh = &eta[ell] + &feedback[ell];
                let applied =
                    protocol_step(&mut buffer, nu[ell], ell, &u_fresh, &eta[ell + 1..n_r], n_r)
                        .unwrap();
                let expected = compact.rows(ell * m, m).into_owned();
                assert_eq!(applied, expected, "pattern {pattern:03b}, step {ell}");
            }
        }
    }

    #[test]
    fn g_bits_monotone_within_window() {
        for pattern in 0..(1u32 << 4) {
            let nu: Vec<bool> = (0..4).map(|i| pattern & (1 << i) != 0).collect();
            let (g, _) = build_g_s(&nu, 4, 4, 1);
            let mut prev = 0.0;
            for i in 0..4 {
                assert!(g[(i, i)] == 0.0 || g[(i, i)] == 1.0);
                assert!(g[(i, i)] >= prev);
                prev = g[(i, i)];
            }
        }
    }

    #[test]
    fn fallback_zero_state_and_linear_zone() {
        let model = reference::four_dim(5.0);
        let dec = decompose(&model, Some(BlockForm { d_orth: 3 })).unwrap();
        let zeta = zeta_upper_bound(&dec, model.u_max);
        let eta = fallback_saturation_policy(&DVector::zeros(3), 0, &dec, 1.0, zeta, model.u_max).unwrap();
        assert_eq!(eta.amax(), 0.0);

        // Inside the linear zone sat is z·zeta/r.
        let z = DVector::from_row_slice(&[0.2, -0.1, 0.05]);
        let r = 1.0;
        let lin = sat_infty(&z, r, zeta);
        assert!((lin - &z * (zeta / r)).amax() < 1e-15);
    }

    #[test]
    fn fallback_norm_bound_and_zeta_range() {
        let model = reference::four_dim(5.0);
        let dec = decompose(&model, Some(BlockForm { d_orth: 3 })).unwrap();
        let zeta = zeta_upper_bound(&dec, model.u_max);
        let r = 1.0;
        let x = DVector::from_row_slice(&[2.0 * r, 0.0, 0.0]);
        let eta = fallback_saturation_policy(&x, 0, &dec, r, zeta, model.u_max).unwrap();
        let reach = crate::model::reachability_matrix(&dec.a_orth, &dec.b_orth, 3).unwrap();
        let bound = 3.0_f64.sqrt() * sigma_max(&pseudo_inverse(&reach)) * zeta;
        assert!(eta.norm() <= bound + 1e-12);
        assert!(eta.amax() <= model.u_max + 1e-12);

        assert!(fallback_saturation_policy(&x, 0, &dec, r, zeta * 1.5, model.u_max).is_err());
        assert!(fallback_saturation_policy(&x, 0, &dec, r, 0.0, model.u_max).is_err());
    }

    #[test]
    fn orth_power_tracker_stays_orthogonal() {
        let model = reference::three_dim(3);
        let mut tracker = OrthPowerTracker::new(model.a.clone());
        for _ in 0..2000 {
            tracker.advance(3);
        }
        let p = tracker.value();
        let defect = (p.transpose() * p - DMatrix::identity(3, 3)).amax();
        assert!(defect < 1e-11, "defect {defect}");
        assert_eq!(tracker.exponent, 6000);
    }
}
