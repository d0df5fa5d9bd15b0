//! Per-instant controller synthesis: offline Monte-Carlo moment matrices,
//! the quadratic objective in the policy decision variables, the hard
//! control-bound rows, the conditional drift (stability) rows, and the
//! solve-with-fallback step that turns a QP solution into policy
//! parameters.
//!
//! The moment matrices freeze everything random about one optimization
//! window: the delivery matrices `G`/`S` of the transmission protocol and
//! the saturated future received innovations. Only the rank-one outer
//! product of the current received innovation is rebuilt online.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channels::{ChannelSpec, RngStream, MOMENTS_CHANNEL_STREAM, MOMENTS_FILTER_STREAM};
use crate::filtering;
use crate::model::{psd_sqrt, Decomposition, StackedMatrices, SystemModel};
use crate::policy::{
    self, build_g_s, feasibility_rows, PolicyParams, Saturator, ThetaVariant,
};
use crate::qpsolver::{self, QpProblem, QpSolution, QpStatus, SolveOptions};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("sample count too small: {got} < {min}")]
    SampleCountTooSmall { got: u64, min: u64 },
    #[error(transparent)]
    Filter(#[from] crate::filtering::FilterError),
    #[error(transparent)]
    Channel(#[from] crate::channels::ChannelError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error("moments were generated for a different model/configuration")]
    MomentsMismatch,
    #[error("moments file is malformed: {0}")]
    BadMomentsFile(String),
    #[error("assembled qp is invalid: {0}")]
    QpData(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Monte-Carlo estimates of the expectation matrices entering the
/// objective, tied to the generating configuration by `model_hash`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineMoments {
    pub mu_g: DMatrix<f64>,
    pub sigma_g: DMatrix<f64>,
    pub mu_s: DMatrix<f64>,
    pub sigma_s: DMatrix<f64>,
    pub sigma_gs: DMatrix<f64>,
    /// `E[psi' psi'ᵀ]` over the innovation blocks t+1 .. t+N-1.
    pub sigma_psi: DMatrix<f64>,
    /// `E[psi' w_{t:N}ᵀ]`.
    pub sigma_psi_w: DMatrix<f64>,
    /// `E[psi' e_tᵀ]`.
    pub sigma_e_psi: DMatrix<f64>,
    pub sample_count: u64,
    pub seed: u64,
    pub model_hash: [u8; 32],
    pub horizon: usize,
    pub recalc: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// Hash of everything the moment matrices depend on. Deliberately excludes
/// `u_max` and `sigma_x0`: neither enters any moment, so sweeps over the
/// control authority can reuse one moments artifact.
pub fn moments_hash(
    model: &SystemModel,
    sensor: &ChannelSpec,
    control: &ChannelSpec,
    sat: &dyn Saturator,
) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut put_mat = |tag: &str, m: &DMatrix<f64>| {
        h.update(tag.as_bytes());
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    };
    put_mat("A", &model.a);
    put_mat("B", &model.b);
    put_mat("C", &model.c);
    put_mat("sigma_w", &model.sigma_w);
    put_mat("sigma_meas", &model.sigma_meas);
    put_mat("Q", &model.cost_q);
    put_mat("Q_N", &model.cost_qn);
    put_mat("R", &model.cost_r);
    h.update((model.horizon as u64).to_le_bytes());
    h.update((model.recalc as u64).to_le_bytes());
    let mut put_channel = |tag: &str, ch: &ChannelSpec| {
        h.update(tag.as_bytes());
        match *ch {
            ChannelSpec::Bernoulli { p } => {
                h.update(b"bernoulli");
                h.update(p.to_le_bytes());
            }
            ChannelSpec::GilbertElliott { p_good_to_bad, p_bad_to_good, p_good, p_bad } => {
                h.update(b"gilbert_elliott");
                h.update(p_good_to_bad.to_le_bytes());
                h.update(p_bad_to_good.to_le_bytes());
                h.update(p_good.to_le_bytes());
                h.update(p_bad.to_le_bytes());
            }
        }
    };
    put_channel("sensor", sensor);
    put_channel("control", control);
    h.update(sat.name().as_bytes());
    h.update(sat.psi_max().to_le_bytes());
    h.finalize().into()
}

/// Estimates all offline moment matrices by Monte-Carlo simulation.
///
/// Delivery moments sample the control channel under the transmission
/// protocol (one stationary window per sample). Innovation moments run the
/// steady-state-gain filter-error process as a single stationary chain
/// (initialized at the stationary covariance, 50 burn-in steps,
/// non-overlapping windows).
pub fn estimate_moments(
    model: &SystemModel,
    sensor: &ChannelSpec,
    control: &ChannelSpec,
    sat: &dyn Saturator,
    samples: u64,
    seed: u64,
) -> Result<OfflineMoments, SynthesisError> {
    const MIN_SAMPLES: u64 = 1000;
    const BURN_IN: usize = 50;
    if samples < MIN_SAMPLES {
        return Err(SynthesisError::SampleCountTooSmall { got: samples, min: MIN_SAMPLES });
    }
    sensor.validate()?;
    control.validate()?;
    let n = model.horizon;
    let n_r = model.recalc;
    let d = model.state_dim();
    let m = model.input_dim();
    let q = model.output_dim();
    let nm = n * m;
    let stacked = crate::model::stack(model)
        .map_err(|e| SynthesisError::QpData(format!("model rejected during stacking: {e}")))?;
    let alpha = &stacked.alpha;

    // --- Delivery moments over the control channel -----------------------
    let mut mu_g = DMatrix::zeros(nm, nm);
    let mut sigma_g = DMatrix::zeros(nm, nm);
    let mut mu_s = DMatrix::zeros(nm, nm);
    let mut sigma_s = DMatrix::zeros(nm, nm);
    let mut sigma_gs = DMatrix::zeros(nm, nm);
    {
        let mut rng = RngStream::new(seed, MOMENTS_CHANNEL_STREAM).rng();
        let mut nu = vec![false; n_r];
        for _ in 0..samples {
            // Fresh stationary channel per window.
            let mut ch = control.build(&mut rng)?;
            for bit in nu.iter_mut() {
                *bit = ch.sample(&mut rng);
            }
            let (g, s) = build_g_s(&nu, n_r, n, m);
            // G and S are diagonal 0/1, so accumulate through their diagonals.
            let gd = g.diagonal();
            let sd = s.diagonal();
            for i in 0..nm {
                mu_g[(i, i)] += gd[i];
                mu_s[(i, i)] += sd[i];
                for j in 0..nm {
                    let aij = alpha[(i, j)];
                    sigma_g[(i, j)] += gd[i] * aij * gd[j];
                    sigma_s[(i, j)] += sd[i] * aij * sd[j];
                    sigma_gs[(i, j)] += gd[i] * aij * sd[j];
                }
            }
        }
        let inv = 1.0 / samples as f64;
        mu_g *= inv;
        sigma_g *= inv;
        mu_s *= inv;
        sigma_s *= inv;
        sigma_gs *= inv;
    }

    // --- Innovation moments over the sensor channel and filter chain -----
    let fut = (n.max(1) - 1) * q;
    let mut sigma_psi = DMatrix::zeros(fut, fut);
    let mut sigma_psi_w = DMatrix::zeros(fut, n * d);
    let mut sigma_e_psi = DMatrix::zeros(fut, d);
    {
        let (k_inf, _) = filtering::steady_state_gain(model)?;
        let p_filt = filtering::steady_state_filtered_cov(model)?;
        let gamma = DMatrix::identity(d, d) - &k_inf * &model.c;
        let phi = &gamma * &model.a;
        let sqrt_w = psd_sqrt(&model.sigma_w);
        let sqrt_meas = psd_sqrt(&model.sigma_meas);
        let sqrt_e = psd_sqrt(&p_filt);

        let mut rng = RngStream::new(seed, MOMENTS_FILTER_STREAM).rng();
        let normal = |rng: &mut rand_chacha::ChaCha8Rng, dim: usize| -> DVector<f64> {
            DVector::from_fn(dim, |_, _| rand::Rng::sample(rng, rand_distr::StandardNormal))
        };

        let mut sensor_ch = sensor.build(&mut rng)?;
        let mut e = &sqrt_e * normal(&mut rng, d);
        for _ in 0..BURN_IN {
            let w = &sqrt_w * normal(&mut rng, d);
            let v = &sqrt_meas * normal(&mut rng, q);
            e = &phi * &e - &k_inf * &v + &gamma * &w;
        }

        let mut psi = DVector::zeros(fut);
        let mut w_stack = DVector::zeros(n * d);
        for _ in 0..samples {
            let e0 = e.clone();
            for k in 0..n {
                let w = &sqrt_w * normal(&mut rng, d);
                w_stack.rows_mut(k * d, d).copy_from(&w);
                let v_next = &sqrt_meas * normal(&mut rng, q);
                e = &phi * &e + &gamma * &w - &k_inf * &v_next;
                // Innovation at window offset k+1 is C e + v; blocks
                // 1..N-1 feed the psi' moments.
                if k + 1 <= n - 1 {
                    let innov = &model.c * &e + &v_next;
                    let delivered = sensor_ch.sample(&mut rng);
                    let block = if delivered { sat.eval_vec(&innov) } else { DVector::zeros(q) };
                    psi.rows_mut(k * q, q).copy_from(&block);
                }
            }
            sigma_psi.syger(1.0, &psi, &psi, 1.0);
            sigma_psi_w.ger(1.0, &psi, &w_stack, 1.0);
            sigma_e_psi.ger(1.0, &psi, &e0, 1.0);
        }
        let inv = 1.0 / samples as f64;
        sigma_psi *= inv;
        sigma_psi_w *= inv;
        sigma_e_psi *= inv;
        // syger fills the lower triangle; mirror it.
        for i in 0..fut {
            for j in (i + 1)..fut {
                sigma_psi[(i, j)] = sigma_psi[(j, i)];
            }
        }
    }

    Ok(OfflineMoments {
        mu_g,
        sigma_g,
        mu_s,
        sigma_s,
        sigma_gs,
        sigma_psi,
        sigma_psi_w,
        sigma_e_psi,
        sample_count: samples,
        seed,
        model_hash: moments_hash(model, sensor, control, sat),
        horizon: n,
        recalc: n_r,
        state_dim: d,
        input_dim: m,
        output_dim: q,
    })
}

/// Drift-constraint configuration of one experiment.
#[derive(Debug, Clone, Copy)]
pub struct StabilityParams {
    pub enabled: bool,
    /// Trigger threshold on the rotated estimate coordinates.
    pub r: f64,
    /// Required drift magnitude per window.
    pub zeta: f64,
}

impl StabilityParams {
    /// Scale-aware defaults: `zeta` at the admissible upper end,
    /// `r = 10 sqrt(trace sigma_w)`.
    pub fn auto(model: &SystemModel, dec: &Decomposition) -> Self {
        StabilityParams {
            enabled: true,
            r: 10.0 * model.sigma_w.trace().sqrt(),
            zeta: policy::zeta_upper_bound(dec, model.u_max),
        }
    }

    pub fn disabled() -> Self {
        StabilityParams { enabled: false, r: f64::INFINITY, zeta: 0.0 }
    }
}

/// One linear drift row over `(eta_{1:κm} + Theta^{(:,t)}_{1:κm} psi_0)`.
#[derive(Debug, Clone)]
pub struct StabilityRow {
    /// Row of `(A_o^{t+κ})ᵀ R_κ`, length κ·m.
    pub coeffs: DVector<f64>,
    /// Index j of the triggered coordinate (diagnostic).
    pub coordinate: usize,
    /// true: row value must be <= -zeta; false: >= zeta.
    pub upper: bool,
    pub zeta: f64,
}

/// Builds the active drift rows for the window starting at absolute time
/// `t` (a multiple of κ). `a_orth_pow_t` is `A_o^t`; the triggered
/// coordinates are those of `(A_oᵀ)^t x̃_o` beyond ±r.
pub fn stability_constraints(
    x_orth: &DVector<f64>,
    a_orth_pow_t: &DMatrix<f64>,
    dec: &Decomposition,
    params: &StabilityParams,
) -> Vec<StabilityRow> {
    if !params.enabled || dec.orth_dim() == 0 {
        return Vec::new();
    }
    let xi = a_orth_pow_t.transpose() * x_orth;
    let reach = crate::model::reachability_matrix(&dec.a_orth, &dec.b_orth, dec.kappa)
        .expect("kappa >= 1 for a nonempty orthogonal part");
    let m_mat = (a_orth_pow_t * policy::power(&dec.a_orth, dec.kappa)).transpose() * reach;
    let mut rows = Vec::new();
    for j in 0..dec.orth_dim() {
        if xi[j] > params.r {
            rows.push(StabilityRow {
                coeffs: m_mat.row(j).transpose(),
                coordinate: j,
                upper: true,
                zeta: params.zeta,
            });
        } else if xi[j] < -params.r {
            rows.push(StabilityRow {
                coeffs: m_mat.row(j).transpose(),
                coordinate: j,
                upper: false,
                zeta: params.zeta,
            });
        }
    }
    rows
}

/// Maps QP decision-vector coordinates back to policy parameters.
///
/// Layout: `[eta (N·m) | theta entries (free blocks, row-major within each
/// block) | eta abs bounds (N·m) | theta abs bounds]`.
#[derive(Debug, Clone)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub variant: ThetaVariant,
    pub blocks: Vec<(usize, usize)>,
    pub n_eta: usize,
    pub n_theta: usize,
}

impl DecisionLayout {
    pub fn new(n: usize, m: usize, q: usize, variant: ThetaVariant) -> Self {
        let blocks = variant.free_blocks(n);
        let n_theta = blocks.len() * m * q;
        DecisionLayout {
            horizon: n,
            input_dim: m,
            output_dim: q,
            variant,
            blocks,
            n_eta: n * m,
            n_theta,
        }
    }

    pub fn total_vars(&self) -> usize {
        2 * (self.n_eta + self.n_theta)
    }

    /// Index of entry (r, c) inside free block `blk`.
    pub fn theta_var(&self, blk: usize, r: usize, c: usize) -> usize {
        self.n_eta + blk * self.input_dim * self.output_dim + r * self.output_dim + c
    }

    pub fn abs_eta_var(&self, i: usize) -> usize {
        self.n_eta + self.n_theta + i
    }

    pub fn abs_theta_var(&self, t: usize) -> usize {
        2 * self.n_eta + self.n_theta + t
    }

    pub fn extract(&self, x: &DVector<f64>) -> PolicyParams {
        let (n, m, q) = (self.horizon, self.input_dim, self.output_dim);
        let mut params = PolicyParams::zeros(n, m, q, self.variant);
        for i in 0..self.n_eta {
            params.eta[i] = x[i];
        }
        for (bi, &(ell, col)) in self.blocks.iter().enumerate() {
            for r in 0..m {
                for c in 0..q {
                    params.theta[(ell * m + r, col * q + c)] = x[self.theta_var(bi, r, c)];
                }
            }
        }
        params
    }
}

/// Assembled per-instant QP plus the mapping back to policy parameters.
#[derive(Debug, Clone)]
pub struct QpAssembly {
    pub problem: QpProblem,
    pub layout: DecisionLayout,
    /// Smallest Hessian eigenvalue before any PSD projection.
    pub min_eig_before: f64,
    pub psd_projected: bool,
}

/// Builds the convex QP of one optimization instant from the frozen
/// moments, the current remote estimate `x_tilde`, the current received
/// innovation, and the active drift rows.
#[allow(clippy::too_many_arguments)]
pub fn assemble_qp(
    moments: &OfflineMoments,
    stacked: &StackedMatrices,
    x_tilde: &DVector<f64>,
    received_innovation: &DVector<f64>,
    sat: &dyn Saturator,
    variant: ThetaVariant,
    u_max: f64,
    stability_rows: &[StabilityRow],
) -> Result<QpAssembly, SynthesisError> {
    let n = moments.horizon;
    let m = moments.input_dim;
    let q = moments.output_dim;
    if stacked.b_stack.ncols() != n * m
        || x_tilde.len() != moments.state_dim
        || received_innovation.len() != q
    {
        return Err(SynthesisError::MomentsMismatch);
    }
    let layout = DecisionLayout::new(n, m, q, variant);
    let nv = layout.total_vars();
    let psi0 = sat.eval_vec(received_innovation);

    // Quadratic form H over (eta, theta); the aux bound variables carry no
    // cost. The QP convention is ½ xᵀP x + qᵀx with P = 2H.
    let mut h = DMatrix::zeros(nv, nv);
    for i in 0..layout.n_eta {
        for j in 0..layout.n_eta {
            h[(i, j)] = moments.sigma_g[(i, j)];
        }
    }

    // x̃ᵀ Q_A, reused by several terms.
    let xqa = (x_tilde.transpose() * &stacked.qa).transpose(); // N·m
    let xqa_mu_s = (xqa.transpose() * &moments.mu_s).transpose();
    let xqa_mu_g = (xqa.transpose() * &moments.mu_g).transpose();

    // Linear coefficients (the QP's q vector is exactly these; the factor
    // 2 from the objective's cross terms is already included).
    let mut lin = DVector::zeros(nv);
    for kk in 0..layout.n_eta {
        lin[kk] = 2.0 * xqa_mu_g[kk];
    }

    // theta' linear couplings:
    // 2 tr(Q_D mu_S Theta' Sigma_psi_w) + 2 tr(Q_A mu_S Theta' Sigma_e_psi).
    let fut = (n.max(1) - 1) * q;
    let l_combined = if fut > 0 {
        let l6 = &moments.sigma_psi_w * &stacked.qd * &moments.mu_s;
        let l7 = &moments.sigma_e_psi * &stacked.qa * &moments.mu_s;
        l6 + l7
    } else {
        DMatrix::zeros(0, n * m)
    };

    for (bi, &(ell, col)) in layout.blocks.iter().enumerate() {
        for r in 0..m {
            let row = ell * m + r;
            for c in 0..q {
                let var = layout.theta_var(bi, r, c);
                if col == 0 {
                    // First block column: couples through psi_0.
                    lin[var] += 2.0 * xqa_mu_s[row] * psi0[c];
                } else {
                    let a = (col - 1) * q + c;
                    lin[var] += 2.0 * l_combined[(a, row)];
                }
            }
        }
    }

    // Quadratic theta blocks and the eta cross term.
    for (bi, &(ell_i, col_i)) in layout.blocks.iter().enumerate() {
        for (bj, &(ell_j, col_j)) in layout.blocks.iter().enumerate() {
            for r_i in 0..m {
                let row_i = ell_i * m + r_i;
                for r_j in 0..m {
                    let row_j = ell_j * m + r_j;
                    let s_ij = moments.sigma_s[(row_i, row_j)];
                    if s_ij == 0.0 {
                        continue;
                    }
                    for c_i in 0..q {
                        let vi = layout.theta_var(bi, r_i, c_i);
                        for c_j in 0..q {
                            let vj = layout.theta_var(bj, r_j, c_j);
                            let weight = match (col_i, col_j) {
                                (0, 0) => psi0[c_i] * psi0[c_j],
                                (0, _) | (_, 0) => 0.0,
                                (ci, cj) => {
                                    moments.sigma_psi[((ci - 1) * q + c_i, (cj - 1) * q + c_j)]
                                }
                            };
                            if weight != 0.0 {
                                h[(vi, vj)] += s_ij * weight;
                            }
                        }
                    }
                }
            }
        }
    }
    for (bi, &(ell, col)) in layout.blocks.iter().enumerate() {
        if col != 0 {
            continue;
        }
        for r in 0..m {
            let row = ell * m + r;
            for c in 0..q {
                let var = layout.theta_var(bi, r, c);
                for k in 0..layout.n_eta {
                    let coupling = moments.sigma_gs[(k, row)] * psi0[c];
                    h[(k, var)] += coupling;
                    h[(var, k)] += coupling;
                }
            }
        }
    }

    // Symmetrize and guard against sampling-noise indefiniteness.
    let nq = layout.n_eta + layout.n_theta;
    let mut h_core = DMatrix::zeros(nq, nq);
    for i in 0..nq {
        for j in 0..nq {
            h_core[(i, j)] = 0.5 * (h[(i, j)] + h[(j, i)]);
        }
    }
    let eig = h_core.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let min_eig_before = eig.eigenvalues.min();
    let psd_projected = min_eig_before < -1e-8 * scale;
    if psd_projected {
        let mut scaled_vecs = eig.eigenvectors.clone();
        for j in 0..nq {
            scaled_vecs.column_mut(j).scale_mut(eig.eigenvalues[j].max(0.0));
        }
        h_core = scaled_vecs * eig.eigenvectors.transpose();
    }
    for i in 0..nq {
        for j in 0..nq {
            h[(i, j)] = h_core[(i, j)];
        }
    }

    let p = h * 2.0;

    // Constraint rows: |eta| and |theta| splits, the per-row control
    // bound, then the drift rows.
    let n_rows = 2 * layout.n_eta + 2 * layout.n_theta + layout.n_eta + stability_rows.len();
    let mut a = DMatrix::zeros(n_rows, nv);
    let mut l = DVector::from_element(n_rows, f64::NEG_INFINITY);
    let mut u = DVector::from_element(n_rows, f64::INFINITY);
    let mut row = 0;

    for i in 0..layout.n_eta {
        // eta_i - a_i <= 0 and eta_i + a_i >= 0.
        a[(row, i)] = 1.0;
        a[(row, layout.abs_eta_var(i))] = -1.0;
        u[row] = 0.0;
        row += 1;
        a[(row, i)] = 1.0;
        a[(row, layout.abs_eta_var(i))] = 1.0;
        l[row] = 0.0;
        row += 1;
    }
    for t in 0..layout.n_theta {
        let var = layout.n_eta + t;
        a[(row, var)] = 1.0;
        a[(row, layout.abs_theta_var(t))] = -1.0;
        u[row] = 0.0;
        row += 1;
        a[(row, var)] = 1.0;
        a[(row, layout.abs_theta_var(t))] = 1.0;
        l[row] = 0.0;
        row += 1;
    }
    // a_i + psi_max * sum of the row's theta bounds <= u_max.
    let psi_max = sat.psi_max();
    for i in 0..layout.n_eta {
        a[(row, layout.abs_eta_var(i))] = 1.0;
        for (bi, &(ell, _)) in layout.blocks.iter().enumerate() {
            for r in 0..m {
                if ell * m + r != i {
                    continue;
                }
                for c in 0..q {
                    let t = layout.theta_var(bi, r, c) - layout.n_eta;
                    a[(row, layout.abs_theta_var(t))] = psi_max;
                }
            }
        }
        u[row] = u_max;
        row += 1;
    }
    for srow in stability_rows {
        let km = srow.coeffs.len();
        for idx in 0..km.min(layout.n_eta) {
            a[(row, idx)] = srow.coeffs[idx];
        }
        for (bi, &(ell, col)) in layout.blocks.iter().enumerate() {
            if col != 0 {
                continue;
            }
            for r in 0..m {
                let global = ell * m + r;
                if global >= km {
                    continue;
                }
                for c in 0..q {
                    a[(row, layout.theta_var(bi, r, c))] = srow.coeffs[global] * psi0[c];
                }
            }
        }
        if srow.upper {
            u[row] = -srow.zeta;
        } else {
            l[row] = srow.zeta;
        }
        row += 1;
    }
    debug_assert_eq!(row, n_rows);

    Ok(QpAssembly {
        problem: QpProblem { p, q: lin, a, l, u },
        layout,
        min_eig_before,
        psd_projected,
    })
}

/// Direct evaluation of the objective (all seven terms) at given policy
/// parameters; used by tests to tie the assembled quadratic form to the
/// moment matrices.
pub fn objective_value(
    moments: &OfflineMoments,
    stacked: &StackedMatrices,
    x_tilde: &DVector<f64>,
    received_innovation: &DVector<f64>,
    sat: &dyn Saturator,
    params: &PolicyParams,
) -> f64 {
    let n = moments.horizon;
    let q = moments.output_dim;
    let nm = n * moments.input_dim;
    let psi0 = sat.eval_vec(received_innovation);
    let theta_c = params.theta.view((0, 0), (nm, q)).into_owned();
    let theta_fut = params.theta.view((0, q), (nm, (n - 1) * q)).into_owned();
    let eta = &params.eta;

    let v_eta = (eta.transpose() * &moments.sigma_g * eta)[(0, 0)];
    let tc_psi = &theta_c * &psi0;
    let v_pi = (tc_psi.transpose() * &moments.sigma_s * &tc_psi)[(0, 0)];
    let v_psi = (&moments.sigma_s * &theta_fut * &moments.sigma_psi * theta_fut.transpose()).trace();
    let xqa = (x_tilde.transpose() * &stacked.qa).transpose();
    let v_cross = 2.0
        * ((eta.transpose() * &moments.sigma_gs + xqa.transpose() * &moments.mu_s) * &tc_psi)[(0, 0)];
    let v_eta_lin = 2.0 * (xqa.transpose() * &moments.mu_g * eta)[(0, 0)];
    let v_w = 2.0 * (&stacked.qd * &moments.mu_s * &theta_fut * &moments.sigma_psi_w).trace();
    let v_e = 2.0 * (&stacked.qa * &moments.mu_s * &theta_fut * &moments.sigma_e_psi).trace();
    v_eta + v_pi + v_psi + v_cross + v_eta_lin + v_w + v_e
}

/// Everything the fallback policy needs when the solver gives up.
pub struct FallbackContext<'a> {
    pub dec: &'a Decomposition,
    pub x_orth: DVector<f64>,
    /// `A_o^t` at the window start.
    pub a_orth_pow_t: &'a DMatrix<f64>,
    pub stability: StabilityParams,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveDiag {
    pub used_fallback: bool,
    pub iterations: usize,
    pub solve_time: f64,
    pub status: QpStatus,
}

/// Solves the assembled QP and maps the optimum back into policy
/// parameters. Solver failure (iteration cap, reported infeasibility, or a
/// constraint-violating optimum) falls back to the constructive
/// saturation policy with zero feedback gain, which is feasible for both
/// the control bound and the drift rows by construction.
pub fn solve_step(
    assembly: &QpAssembly,
    sat: &dyn Saturator,
    u_max: f64,
    fallback: Option<&FallbackContext<'_>>,
    opts: &SolveOptions,
) -> Result<(PolicyParams, SolveDiag), SynthesisError> {
    let sol: QpSolution = qpsolver::solve(&assembly.problem, opts)
        .map_err(|e| SynthesisError::QpData(e.to_string()))?;
    let mut use_fallback = sol.status != QpStatus::Optimal;
    let mut params = if use_fallback {
        PolicyParams::zeros(
            assembly.layout.horizon,
            assembly.layout.input_dim,
            assembly.layout.output_dim,
            assembly.layout.variant,
        )
    } else {
        assembly.layout.extract(&sol.x)
    };

    if !use_fallback {
        // The ADMM optimum can overshoot a row by its solve tolerance;
        // rescale any violating row back onto the bound so the returned
        // parameters satisfy the hard constraint exactly.
        let psi_max = sat.psi_max();
        let margins = feasibility_rows(&params, psi_max, u_max);
        for i in 0..margins.len() {
            if margins[i] < 0.0 {
                let total = u_max - margins[i];
                let scale = (u_max / total) * (1.0 - 1e-12);
                params.eta[i] *= scale;
                params.theta.row_mut(i).scale_mut(scale);
            }
        }
        if feasibility_rows(&params, psi_max, u_max).min() < -1e-7 {
            use_fallback = true;
        }
    }

    if use_fallback {
        params = PolicyParams::zeros(
            assembly.layout.horizon,
            assembly.layout.input_dim,
            assembly.layout.output_dim,
            assembly.layout.variant,
        );
        if let Some(ctx) = fallback {
            if ctx.stability.enabled && ctx.dec.orth_dim() > 0 {
                let eta_head = policy::fallback_saturation_policy_pow(
                    &ctx.x_orth,
                    ctx.a_orth_pow_t,
                    ctx.dec,
                    ctx.stability.r,
                    ctx.stability.zeta,
                    u_max,
                )?;
                params.eta.rows_mut(0, eta_head.len()).copy_from(&eta_head);
            }
        }
    }

    Ok((
        params,
        SolveDiag {
            used_fallback: use_fallback,
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            status: sol.status,
        },
    ))
}

// --- Moments file format --------------------------------------------------
//
// Little-endian binary: magic, version, model hash, seed, sample count,
// dims, then the eight matrices (rows, cols, row-major f64 data) in a
// fixed order. Byte-identical for identical inputs.

const MOMENTS_MAGIC: &[u8; 8] = b"NMPCMOM1";

pub fn write_moments(path: &Path, moments: &OfflineMoments) -> Result<(), SynthesisError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MOMENTS_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&moments.model_hash);
    buf.extend_from_slice(&moments.seed.to_le_bytes());
    buf.extend_from_slice(&moments.sample_count.to_le_bytes());
    for dim in [
        moments.horizon,
        moments.recalc,
        moments.state_dim,
        moments.input_dim,
        moments.output_dim,
    ] {
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for mat in moments.matrices() {
        buf.extend_from_slice(&(mat.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(mat.ncols() as u64).to_le_bytes());
        for i in 0..mat.nrows() {
            for j in 0..mat.ncols() {
                buf.extend_from_slice(&mat[(i, j)].to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

impl OfflineMoments {
    fn matrices(&self) -> [&DMatrix<f64>; 8] {
        [
            &self.mu_g,
            &self.sigma_g,
            &self.mu_s,
            &self.sigma_s,
            &self.sigma_gs,
            &self.sigma_psi,
            &self.sigma_psi_w,
            &self.sigma_e_psi,
        ]
    }
}

pub fn read_moments(path: &Path) -> Result<OfflineMoments, SynthesisError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut at = 0usize;
    let take = |buf: &[u8], at: &mut usize, len: usize| -> Result<Vec<u8>, SynthesisError> {
        if *at + len > buf.len() {
            return Err(SynthesisError::BadMomentsFile("truncated".into()));
        }
        let out = buf[*at..*at + len].to_vec();
        *at += len;
        Ok(out)
    };
    let magic = take(&buf, &mut at, 8)?;
    if magic != MOMENTS_MAGIC {
        return Err(SynthesisError::BadMomentsFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap());
    if version != 1 {
        return Err(SynthesisError::BadMomentsFile(format!("unsupported version {version}")));
    }
    let model_hash: [u8; 32] = take(&buf, &mut at, 32)?.try_into().unwrap();
    let seed = u64::from_le_bytes(take(&buf, &mut at, 8)?.try_into().unwrap());
    let sample_count = u64::from_le_bytes(take(&buf, &mut at, 8)?.try_into().unwrap());
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = u64::from_le_bytes(take(&buf, &mut at, 8)?.try_into().unwrap()) as usize;
    }
    let mut mats = Vec::with_capacity(8);
    for _ in 0..8 {
        let rows = u64::from_le_bytes(take(&buf, &mut at, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&buf, &mut at, 8)?.try_into().unwrap()) as usize;
        let data = take(&buf, &mut at, rows * cols * 8)?;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let off = (i * cols + j) * 8;
                m[(i, j)] = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
            }
        }
        mats.push(m);
    }
    if at != buf.len() {
        return Err(SynthesisError::BadMomentsFile("trailing bytes".into()));
    }
    let mut it = mats.into_iter();
    Ok(OfflineMoments {
        mu_g: it.next().unwrap(),
        sigma_g: it.next().unwrap(),
        mu_s: it.next().unwrap(),
        sigma_s: it.next().unwrap(),
        sigma_gs: it.next().unwrap(),
        sigma_psi: it.next().unwrap(),
        sigma_psi_w: it.next().unwrap(),
        sigma_e_psi: it.next().unwrap(),
        sample_count,
        seed,
        model_hash,
        horizon: dims[0],
        recalc: dims[1],
        state_dim: dims[2],
        input_dim: dims[3],
        output_dim: dims[4],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decompose, reference, stack, BlockForm};
    use crate::policy::Sigmoid;

    fn bern(p: f64) -> ChannelSpec {
        ChannelSpec::Bernoulli { p }
    }

    #[test]
    fn sample_count_floor() {
        let model = reference::four_dim(5.0);
        let got = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 10, 1);
        assert!(matches!(got, Err(SynthesisError::SampleCountTooSmall { .. })));
    }

    #[test]
    fn certain_delivery_gives_exact_moments() {
        let model = reference::four_dim(5.0);
        let stacked = stack(&model).unwrap();
        let m = estimate_moments(&model, &bern(0.8), &bern(1.0), &Sigmoid, 1000, 7).unwrap();
        let nm = model.horizon * model.input_dim();
        assert!((m.mu_g.clone() - DMatrix::identity(nm, nm)).amax() < 1e-14);
        assert!((m.mu_s.clone() - DMatrix::identity(nm, nm)).amax() < 1e-14);
        assert!((m.sigma_g.clone() - &stacked.alpha).amax() < 1e-12);
        assert!((m.sigma_s.clone() - &stacked.alpha).amax() < 1e-12);
        assert!((m.sigma_gs.clone() - &stacked.alpha).amax() < 1e-12);
    }

    #[test]
    fn mu_g_diagonal_follows_delivery_recursion() {
        let model = reference::four_dim(5.0);
        let p_c = 0.7;
        let samples = 40_000u64;
        let m = estimate_moments(&model, &bern(0.8), &bern(p_c), &Sigmoid, samples, 3).unwrap();
        for i in 0..model.recalc {
            // g block i is 1 - (1-p_c)^(i+1); three binomial standard errors.
            let expect = 1.0 - (1.0 - p_c).powi(i as i32 + 1);
            let se = (expect * (1.0 - expect) / samples as f64).sqrt();
            let got = m.mu_g[(i, i)];
            assert!((got - expect).abs() < 3.0 * se + 1e-12, "block {i}: {got} vs {expect}");
        }
        for i in model.recalc..model.horizon {
            assert_eq!(m.mu_g[(i, i)], 1.0);
        }
        // Diagonal entries live in [p_c, 1].
        for i in 0..model.horizon {
            assert!(m.mu_g[(i, i)] >= p_c - 0.02 && m.mu_g[(i, i)] <= 1.0);
        }
    }

    #[test]
    fn dead_sensor_zeroes_innovation_moments() {
        let model = reference::four_dim(5.0);
        let m = estimate_moments(&model, &bern(0.0), &bern(0.8), &Sigmoid, 2000, 5).unwrap();
        assert_eq!(m.sigma_psi.amax(), 0.0);
        assert_eq!(m.sigma_psi_w.amax(), 0.0);
        assert_eq!(m.sigma_e_psi.amax(), 0.0);
    }

    #[test]
    fn moment_matrices_are_psd() {
        let model = reference::four_dim(5.0);
        let m = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 5000, 11).unwrap();
        assert!(crate::model::is_positive_semidefinite(&m.sigma_g));
        assert!(crate::model::is_positive_semidefinite(&m.sigma_s));
        assert!(crate::model::is_positive_semidefinite(&m.sigma_psi));
    }

    #[test]
    fn moments_roundtrip_and_determinism() {
        let model = reference::four_dim(5.0);
        let a = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 1500, 42).unwrap();
        let b = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 1500, 42).unwrap();
        assert_eq!(a, b);
        let dir = std::env::temp_dir().join(format!("netmpc-moments-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.bin");
        write_moments(&path, &a).unwrap();
        let back = read_moments(&path).unwrap();
        assert_eq!(a, back);
        write_moments(&path, &b).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        write_moments(&path, &a).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn zero_variant_objective_reduces_to_eta_terms() {
        let model = reference::four_dim(5.0);
        let stacked = stack(&model).unwrap();
        let moments = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 2000, 9).unwrap();
        let x_tilde = DVector::from_row_slice(&[1.0, -2.0, 0.5, 0.2]);
        let innov = DVector::from_row_slice(&[0.3, -0.1, 0.0, 0.7]);
        let asm = assemble_qp(
            &moments, &stacked, &x_tilde, &innov, &Sigmoid, ThetaVariant::Zero, 5.0, &[],
        )
        .unwrap();
        // Evaluate the QP quadratic at a random eta and compare with the
        // direct eta-only objective.
        let nm = model.horizon;
        let mut x = DVector::zeros(asm.layout.total_vars());
        for i in 0..nm {
            x[i] = 0.1 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let qp_val = asm.problem.objective(&x);
        let params = asm.layout.extract(&x);
        let eta = &params.eta;
        let direct = (eta.transpose() * &moments.sigma_g * eta)[(0, 0)]
            + 2.0 * ((x_tilde.transpose() * &stacked.qa) * &moments.mu_g * eta)[(0, 0)];
        assert!((qp_val - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn assembled_quadratic_matches_direct_objective() {
        let model = reference::four_dim(5.0);
        let stacked = stack(&model).unwrap();
        let moments = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 2000, 13).unwrap();
        let x_tilde = DVector::from_row_slice(&[3.0, -1.0, 2.0, -0.5]);
        let innov = DVector::from_row_slice(&[1.0, 0.5, -0.2, 0.1]);
        for variant in [ThetaVariant::Full, ThetaVariant::Diagonal] {
            let asm = assemble_qp(
                &moments, &stacked, &x_tilde, &innov, &Sigmoid, variant, 5.0, &[],
            )
            .unwrap();
            // Random decision vector within structure.
            let mut x = DVector::zeros(asm.layout.total_vars());
            let core = asm.layout.n_eta + asm.layout.n_theta;
            let mut state = 0.123_f64;
            for i in 0..core {
                state = (state * 97.31).fract();
                x[i] = (state - 0.5) * 0.4;
            }
            let params = asm.layout.extract(&x);
            let direct = objective_value(&moments, &stacked, &x_tilde, &innov, &Sigmoid, &params);
            let qp_val = asm.problem.objective(&x);
            assert!(
                (qp_val - direct).abs() < 1e-8 * direct.abs().max(1.0),
                "variant {:?}: {qp_val} vs {direct}",
                variant
            );
        }
    }

    #[test]
    fn origin_state_gives_zero_nominal_plan() {
        let model = reference::four_dim(5.0);
        let stacked = stack(&model).unwrap();
        let moments = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 5000, 17).unwrap();
        let asm = assemble_qp(
            &moments,
            &stacked,
            &DVector::zeros(4),
            &DVector::zeros(4),
            &Sigmoid,
            ThetaVariant::Full,
            5.0,
            &[],
        )
        .unwrap();
        let (params, diag) =
            solve_step(&asm, &Sigmoid, 5.0, None, &SolveOptions::default()).unwrap();
        assert!(!diag.used_fallback);
        // No state information and no received innovation: the nominal
        // plan is zero and the optimum improves on (or matches) the
        // origin's zero objective through the noise-compensation gain.
        assert!(params.eta.amax() < 1e-4, "eta {}", params.eta.amax());
        let zeros = DVector::zeros(4);
        let val = objective_value(&moments, &stacked, &zeros, &zeros, &Sigmoid, &params);
        assert!(val <= 1e-8, "objective {val}");
        assert!(feasibility_rows(&params, 1.0, 5.0).min() >= -1e-7);
    }

    #[test]
    fn forced_fallback_is_feasible() {
        let model = reference::four_dim(5.0);
        let dec = decompose(&model, Some(BlockForm { d_orth: 3 })).unwrap();
        let stacked = stack(&model).unwrap();
        let moments = estimate_moments(&model, &bern(0.8), &bern(0.8), &Sigmoid, 2000, 19).unwrap();
        let stability = StabilityParams::auto(&model, &dec);
        let x_orth = DVector::from_row_slice(&[2.0 * stability.r, 0.0, 0.0]);
        let pow0 = DMatrix::identity(3, 3);
        let rows = stability_constraints(&x_orth, &pow0, &dec, &stability);
        assert_eq!(rows.len(), 1);
        let mut x_tilde = DVector::zeros(4);
        x_tilde.rows_mut(0, 3).copy_from(&x_orth);
        let innov = DVector::zeros(4);
        let asm = assemble_qp(
            &moments, &stacked, &x_tilde, &innov, &Sigmoid, ThetaVariant::Full, 5.0, &rows,
        )
        .unwrap();
        let ctx = FallbackContext {
            dec: &dec,
            x_orth: x_orth.clone(),
            a_orth_pow_t: &pow0,
            stability,
        };
        let mut opts = SolveOptions::default();
        opts.max_iter = 0; // force the iteration cap
        let (params, diag) = solve_step(&asm, &Sigmoid, 5.0, Some(&ctx), &opts).unwrap();
        assert!(diag.used_fallback);
        assert!(feasibility_rows(&params, 1.0, 5.0).min() >= 0.0);
        // The fallback satisfies the triggered drift row with margin >= 0.
        let val = rows[0].coeffs.dot(&params.eta.rows(0, rows[0].coeffs.len()));
        assert!(val <= -stability.zeta + 1e-9, "drift row value {val}");
    }

    #[test]
    fn stability_rows_trigger_and_sign() {
        let model = reference::four_dim(5.0);
        let dec = decompose(&model, Some(BlockForm { d_orth: 3 })).unwrap();
        let params = StabilityParams { enabled: true, r: 1.0, zeta: 0.5 };
        let pow0 = DMatrix::identity(3, 3);
        assert!(stability_constraints(&DVector::zeros(3), &pow0, &dec, &params).is_empty());
        let small = DVector::from_row_slice(&[0.5, -0.5, 0.9]);
        assert!(stability_constraints(&small, &pow0, &dec, &params).is_empty());
        let big = DVector::from_row_slice(&[2.0, 0.0, -3.0]);
        let rows = stability_constraints(&big, &pow0, &dec, &params);
        assert_eq!(rows.len(), 2);
        assert!(rows[0].upper && rows[0].coordinate == 0);
        assert!(!rows[1].upper && rows[1].coordinate == 2);
        // Row coefficients at t = 0 are (A_o^κ)ᵀ R_κ rows.
        let reach = crate::model::reachability_matrix(&dec.a_orth, &dec.b_orth, 3).unwrap();
        let expected = (policy::power(&dec.a_orth, 3)).transpose() * reach;
        assert!((rows[0].coeffs.transpose() - expected.row(0)).amax() < 1e-12);
    }
}

