//! Closed-loop Monte-Carlo harness: plant, smart-sensor Kalman filter,
//! erasure channels, remote estimator, per-window controller synthesis and
//! the actuator-side transmission protocol, plus the aggregate metrics the
//! experiment sweeps report.
//!
//! Paths are independent units of work with their own random streams, so
//! results do not depend on scheduling; aggregation folds per-path results
//! in path order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::channels::{path_stream, ChannelSpec, StreamRole};
use crate::estimation::{remote_update, EstimatorState};
use crate::filtering;
use crate::model::{decompose, psd_sqrt, stack, BlockForm, Decomposition, StackedMatrices, SystemModel};
use crate::policy::{
    protocol_step, ActuatorBuffer, OrthPowerTracker, PolicyParams, Saturator, ThetaVariant,
};
use crate::qpsolver::SolveOptions;
use crate::synthesis::{
    assemble_qp, stability_constraints, FallbackContext, OfflineMoments, StabilityParams,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Filter(#[from] crate::filtering::FilterError),
    #[error(transparent)]
    Synthesis(#[from] crate::synthesis::SynthesisError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Channel(#[from] crate::channels::ChannelError),
    #[error(transparent)]
    Estimation(#[from] crate::estimation::EstimationError),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Controller selection: solve the QP over a gain structure, or apply the
/// constructive saturation policy directly (no optimization).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Qp(ThetaVariant),
    Fallback,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Qp(v) => v.name(),
            PolicyKind::Fallback => "fallback",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        if name == "fallback" {
            return Some(PolicyKind::Fallback);
        }
        ThetaVariant::from_name(name).map(PolicyKind::Qp)
    }
}

/// Declarative simulation description; `prepare` resolves it into a
/// runnable setup.
pub struct SimConfig {
    pub model: SystemModel,
    /// Known block split of A (both bundled examples supply one).
    pub block_form: Option<BlockForm>,
    pub sensor: ChannelSpec,
    pub control: ChannelSpec,
    pub sat: Box<dyn Saturator>,
    pub policy: PolicyKind,
    pub stability_enabled: bool,
    /// Optional overrides of the scale-aware defaults.
    pub stability_r: Option<f64>,
    pub stability_zeta: Option<f64>,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub moment_samples: u64,
    pub moment_seed: u64,
    pub solver: SolveOptions,
}

impl SimConfig {
    /// Resolves decomposition, stacked matrices and stability parameters,
    /// estimating fresh moments.
    pub fn prepare(&self) -> Result<SimSetup, SimError> {
        let moments = crate::synthesis::estimate_moments(
            &self.model,
            &self.sensor,
            &self.control,
            self.sat.as_ref(),
            self.moment_samples,
            self.moment_seed,
        )?;
        self.prepare_with_moments(moments)
    }

    /// Same, reusing a precomputed moments artifact (hash-checked).
    pub fn prepare_with_moments(&self, moments: OfflineMoments) -> Result<SimSetup, SimError> {
        let expected =
            crate::synthesis::moments_hash(&self.model, &self.sensor, &self.control, self.sat.as_ref());
        if moments.model_hash != expected {
            return Err(crate::synthesis::SynthesisError::MomentsMismatch.into());
        }
        let dec = decompose(&self.model, self.block_form)?;
        let stacked = stack(&self.model)?;
        let mut warnings = Vec::new();
        match self.model.validate() {
            Ok(report) => {
                for failed in report.failed() {
                    warnings.push(format!("model assumption failed: {} ({})", failed.name, failed.detail));
                }
            }
            Err(e) => return Err(e.into()),
        }
        if self.steps % self.model.recalc != 0 {
            warnings.push(format!(
                "steps = {} is not a multiple of the recalculation interval {}",
                self.steps, self.model.recalc
            ));
        }
        if self.paths == 0 {
            return Err(SimError::Config("need at least one path".into()));
        }
        let needs_drift = self.stability_enabled || self.policy == PolicyKind::Fallback;
        if self.stability_enabled && dec.orth_dim() > 0 && self.model.recalc != dec.kappa {
            return Err(SimError::Config(format!(
                "stability constraints require N_r = kappa ({}) but N_r = {}",
                dec.kappa, self.model.recalc
            )));
        }
        let mut stability = if needs_drift && dec.orth_dim() > 0 {
            StabilityParams::auto(&self.model, &dec)
        } else {
            StabilityParams::disabled()
        };
        stability.enabled = self.stability_enabled;
        if let Some(r) = self.stability_r {
            stability.r = r;
        }
        if let Some(z) = self.stability_zeta {
            stability.zeta = z;
        }

        Ok(SimSetup {
            model: self.model.clone(),
            dec,
            stacked,
            moments,
            sensor: self.sensor.clone(),
            control: self.control.clone(),
            sat: crate::policy::saturator_by_name(self.sat.name(), self.sat.psi_max())?,
            policy: self.policy,
            stability,
            steps: self.steps,
            paths: self.paths,
            seed: self.seed,
            solver: self.solver,
            sqrt_w: psd_sqrt(&self.model.sigma_w),
            sqrt_meas: psd_sqrt(&self.model.sigma_meas),
            sqrt_x0: psd_sqrt(&self.model.sigma_x0),
            warnings,
        })
    }
}

/// Fully resolved simulation inputs, shareable read-only across worker
/// threads.
pub struct SimSetup {
    pub model: SystemModel,
    pub dec: Decomposition,
    pub stacked: StackedMatrices,
    pub moments: OfflineMoments,
    pub sensor: ChannelSpec,
    pub control: ChannelSpec,
    pub sat: Box<dyn Saturator>,
    pub policy: PolicyKind,
    pub stability: StabilityParams,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub solver: SolveOptions,
    sqrt_w: DMatrix<f64>,
    sqrt_meas: DMatrix<f64>,
    sqrt_x0: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Everything recorded along one closed-loop trajectory.
#[derive(Debug, Clone)]
pub struct PathResult {
    /// `|x_t|²` for t = 0..=T.
    pub sq_state: Vec<f64>,
    /// `|u^a_t|²` for t = 0..T-1.
    pub sq_control: Vec<f64>,
    /// Wall-clock seconds per QP solve (empty for the fallback policy).
    pub solve_times: Vec<f64>,
    pub solve_iters: Vec<usize>,
    pub fallback_flags: Vec<bool>,
    pub sensor_bits: Vec<bool>,
    pub control_bits: Vec<bool>,
    /// Rotated orthogonal-estimate walk, one entry per window start plus
    /// the final boundary when T is a window multiple.
    pub z_walk: Vec<DVector<f64>>,
    /// `|x̂_t - x̃_t|²` per step, the dropout-induced estimation error.
    pub sq_est_err: Vec<f64>,
}

/// Monte-Carlo aggregate of the paper's reported metrics.
#[derive(Debug, Clone)]
pub struct AggregateStats {
    /// Path-averaged maximum of `|x_t|²` over the run (the empirical
    /// mean-square bound).
    pub empirical_msb: f64,
    /// max over t of the path-averaged `|x_t|²` (the pointwise-in-time
    /// reading; kept as a diagnostic).
    pub sup_mean_sq: f64,
    /// mean over paths and stages of the squared applied-control norm.
    pub mae_per_stage: f64,
    pub mean_sq_trace: Vec<f64>,
    pub mean_norm_trace: Vec<f64>,
    pub mean_solve_time: f64,
    pub total_solves: usize,
    pub fallback_rate: f64,
}

fn draw_normal(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rand::Rng::sample(rng, rand_distr::StandardNormal))
}

/// Runs one trajectory. Stream discipline: per-path substreams for the
/// initial state, process noise, measurement noise and the two channels,
/// with a fixed number of draws per step, so parameter sweeps stay coupled
/// under common random numbers.
pub fn run_path(setup: &SimSetup, path: u64) -> Result<PathResult, SimError> {
    let model = &setup.model;
    let d = model.state_dim();
    let m = model.input_dim();
    let q = model.output_dim();
    let n_r = model.recalc;
    let t_end = setup.steps;
    let d_o = setup.dec.orth_dim();

    let mut x0_rng = path_stream(setup.seed, path, StreamRole::InitialState).rng();
    let mut w_rng = path_stream(setup.seed, path, StreamRole::ProcessNoise).rng();
    let mut v_rng = path_stream(setup.seed, path, StreamRole::MeasurementNoise).rng();
    let mut s_rng = path_stream(setup.seed, path, StreamRole::SensorChannel).rng();
    let mut nu_rng = path_stream(setup.seed, path, StreamRole::ControlChannel).rng();

    let mut sensor_ch = setup.sensor.build(&mut s_rng)?;
    let mut control_ch = setup.control.build(&mut nu_rng)?;

    let mut x = &setup.sqrt_x0 * draw_normal(&mut x0_rng, d);
    let y0 = &model.c * &x + &setup.sqrt_meas * draw_normal(&mut v_rng, q);
    let (mut kf, _) = filtering::initialize(model, &y0)?;
    let mut est = EstimatorState::initial(model);
    let s0 = sensor_ch.sample(&mut s_rng);
    let packet0 = (kf.x_hat.clone(), y0);
    est = remote_update(
        &est,
        s0,
        s0.then_some((&packet0.0, &packet0.1)),
        &DVector::zeros(m),
        model,
    )?;

    let mut result = PathResult {
        sq_state: Vec::with_capacity(t_end + 1),
        sq_control: Vec::with_capacity(t_end),
        solve_times: Vec::new(),
        solve_iters: Vec::new(),
        fallback_flags: Vec::new(),
        sensor_bits: vec![s0],
        control_bits: Vec::with_capacity(t_end),
        z_walk: Vec::new(),
        sq_est_err: Vec::with_capacity(t_end + 1),
    };
    result.sq_est_err.push((&kf.x_hat - &est.x_tilde).norm_squared());

    let mut pow = OrthPowerTracker::new(setup.dec.a_orth.clone());
    let mut buffer = ActuatorBuffer::empty();
    let mut params = PolicyParams::zeros(
        model.horizon,
        m,
        q,
        match setup.policy {
            PolicyKind::Qp(v) => v,
            PolicyKind::Fallback => ThetaVariant::Zero,
        },
    );
    let mut window_psi: Vec<DVector<f64>> = Vec::with_capacity(n_r);

    for t in 0..t_end {
        let ell = t % n_r;
        if ell == 0 {
            buffer = ActuatorBuffer::empty();
            window_psi.clear();
            let x_blk = &setup.dec.basis_inv * &est.x_tilde;
            let x_orth = x_blk.rows(0, d_o).into_owned();
            if d_o > 0 {
                result.z_walk.push(pow.value().transpose() * &x_orth);
            }
            match setup.policy {
                PolicyKind::Fallback => {
                    params = PolicyParams::zeros(model.horizon, m, q, ThetaVariant::Zero);
                    if d_o > 0 {
                        let eta_head = crate::policy::fallback_saturation_policy_pow(
                            &x_orth,
                            pow.value(),
                            &setup.dec,
                            setup.stability.r,
                            setup.stability.zeta,
                            model.u_max,
                        )?;
                        params.eta.rows_mut(0, eta_head.len()).copy_from(&eta_head);
                    }
                }
                PolicyKind::Qp(variant) => {
                    let rows = stability_constraints(&x_orth, pow.value(), &setup.dec, &setup.stability);
                    let asm = assemble_qp(
                        &setup.moments,
                        &setup.stacked,
                        &est.x_tilde,
                        &est.received_innovation,
                        setup.sat.as_ref(),
                        variant,
                        model.u_max,
                        &rows,
                    )?;
                    let ctx = FallbackContext {
                        dec: &setup.dec,
                        x_orth: x_orth.clone(),
                        a_orth_pow_t: pow.value(),
                        stability: StabilityParams { enabled: true, ..setup.stability },
                    };
                    let (p, diag) = crate::synthesis::solve_step(
                        &asm,
                        setup.sat.as_ref(),
                        model.u_max,
                        Some(&ctx),
                        &setup.solver,
                    )?;
                    params = p;
                    result.solve_times.push(diag.solve_time);
                    result.solve_iters.push(diag.iterations);
                    result.fallback_flags.push(diag.used_fallback);
                }
            }
        }

        // Controller: fresh command for this stage from the innovations
        // received so far in the window.
        window_psi.push(setup.sat.eval_vec(&est.received_innovation));
        let mut u_cmd = params.eta_block(ell);
        for (i, psi) in window_psi.iter().enumerate() {
            u_cmd += params.theta_block(ell, i) * psi;
        }

        let nu = control_ch.sample(&mut nu_rng);
        result.control_bits.push(nu);
        let eta_tail: Vec<DVector<f64>> = (ell + 1..n_r).map(|k| params.eta_block(k)).collect();
        let u_applied = protocol_step(&mut buffer, nu, ell, &u_cmd, &eta_tail, n_r)?;

        result.sq_state.push(x.norm_squared());
        result.sq_control.push(u_applied.norm_squared());

        // Plant, then the t+1 sensing chain.
        let w = &setup.sqrt_w * draw_normal(&mut w_rng, d);
        x = &model.a * &x + &model.b * &u_applied + w;
        let y = &model.c * &x + &setup.sqrt_meas * draw_normal(&mut v_rng, q);
        let (kf_next, _) = filtering::predict_update(&kf, &u_applied, &y, model)?;
        kf = kf_next;
        let s = sensor_ch.sample(&mut s_rng);
        result.sensor_bits.push(s);
        let packet = (kf.x_hat.clone(), y);
        est = remote_update(&est, s, s.then_some((&packet.0, &packet.1)), &u_applied, model)?;
        result.sq_est_err.push((&kf.x_hat - &est.x_tilde).norm_squared());

        if ell == n_r - 1 {
            pow.advance(n_r);
        }
    }
    result.sq_state.push(x.norm_squared());
    if t_end % n_r == 0 && d_o > 0 {
        let x_blk = &setup.dec.basis_inv * &est.x_tilde;
        let x_orth = x_blk.rows(0, d_o).into_owned();
        result.z_walk.push(pow.value().transpose() * &x_orth);
    }
    Ok(result)
}

/// Runs all paths (work-stealing across the rayon pool) and aggregates.
/// The aggregate is a fold over per-path results in path order, so it does
/// not depend on scheduling.
pub fn run_monte_carlo(setup: &SimSetup) -> Result<(AggregateStats, Vec<PathResult>), SimError> {
    let paths: Result<Vec<PathResult>, SimError> =
        (0..setup.paths as u64).into_par_iter().map(|p| run_path(setup, p)).collect();
    let paths = paths?;
    let stats = aggregate(&paths);
    Ok((stats, paths))
}

pub fn aggregate(paths: &[PathResult]) -> AggregateStats {
    let n_paths = paths.len().max(1) as f64;
    let t_len = paths.iter().map(|p| p.sq_state.len()).min().unwrap_or(0);
    let mut mean_sq_trace = vec![0.0; t_len];
    let mut mean_norm_trace = vec![0.0; t_len];
    for p in paths {
        for t in 0..t_len {
            mean_sq_trace[t] += p.sq_state[t] / n_paths;
            mean_norm_trace[t] += p.sq_state[t].sqrt() / n_paths;
        }
    }
    let sup_mean_sq = mean_sq_trace.iter().copied().fold(0.0, f64::max);
    let empirical_msb = paths
        .iter()
        .map(|p| p.sq_state.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / n_paths;
    let mut control_sum = 0.0;
    let mut control_count = 0usize;
    let mut time_sum = 0.0;
    let mut solves = 0usize;
    let mut fallbacks = 0usize;
    for p in paths {
        control_sum += p.sq_control.iter().sum::<f64>();
        control_count += p.sq_control.len();
        time_sum += p.solve_times.iter().sum::<f64>();
        solves += p.solve_times.len();
        fallbacks += p.fallback_flags.iter().filter(|&&f| f).count();
    }
    AggregateStats {
        empirical_msb,
        sup_mean_sq,
        mae_per_stage: if control_count > 0 { control_sum / control_count as f64 } else { 0.0 },
        mean_sq_trace,
        mean_norm_trace,
        mean_solve_time: if solves > 0 { time_sum / solves as f64 } else { 0.0 },
        total_solves: solves,
        fallback_rate: if solves > 0 { fallbacks as f64 / solves as f64 } else { 0.0 },
    }
}

/// Empirical MSB of a path subset (bootstrap building block): mean over
/// the selected paths of the per-path maximum.
pub fn msb_of(paths: &[PathResult], indices: &[usize]) -> f64 {
    indices
        .iter()
        .map(|&i| paths[i].sq_state.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / indices.len() as f64
}

/// Bootstrap standard error of the empirical MSB over path resamples.
pub fn bootstrap_msb_se(paths: &[PathResult], reps: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = crate::channels::RngStream::new(seed, 0xB00).rng();
    let n = paths.len();
    let mut values = Vec::with_capacity(reps);
    let mut idx = vec![0usize; n];
    for _ in 0..reps {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        values.push(msb_of(paths, &idx));
    }
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
    var.sqrt()
}

/// Bootstrap standard error of a *difference* of MSBs computed on paired
/// runs (same path seeds); resamples path indices jointly.
pub fn bootstrap_msb_diff_se(a: &[PathResult], b: &[PathResult], reps: usize, seed: u64) -> f64 {
    use rand::Rng;
    assert_eq!(a.len(), b.len());
    let mut rng = crate::channels::RngStream::new(seed, 0xB01).rng();
    let n = a.len();
    let mut values = Vec::with_capacity(reps);
    let mut idx = vec![0usize; n];
    for _ in 0..reps {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        values.push(msb_of(a, &idx) - msb_of(b, &idx));
    }
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
    var.sqrt()
}

/// Sweepable experiment parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    UMax,
    SensorP,
    ControlP,
    SensorGoodP,
    ControlGoodP,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::UMax => "u_max",
            SweepParam::SensorP => "p_s",
            SweepParam::ControlP => "p_c",
            SweepParam::SensorGoodP => "p_gs",
            SweepParam::ControlGoodP => "p_gc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "u_max" => Some(SweepParam::UMax),
            "p_s" => Some(SweepParam::SensorP),
            "p_c" => Some(SweepParam::ControlP),
            "p_gs" => Some(SweepParam::SensorGoodP),
            "p_gc" => Some(SweepParam::ControlGoodP),
            _ => None,
        }
    }

    /// Applies the value to a config. Bernoulli probabilities retarget the
    /// channel's `p`; `p_gs`/`p_gc` retarget a Gilbert-Elliott good state.
    pub fn apply(&self, config: &mut SimConfig, value: f64) -> Result<(), SimError> {
        let set_bernoulli = |ch: &mut ChannelSpec, v: f64| -> Result<(), SimError> {
            match ch {
                ChannelSpec::Bernoulli { p } => {
                    *p = v;
                    Ok(())
                }
                _ => Err(SimError::Config(
                    "p_s/p_c sweeps require a bernoulli channel; use p_gs/p_gc for gilbert_elliott".into(),
                )),
            }
        };
        let set_good = |ch: &mut ChannelSpec, v: f64| -> Result<(), SimError> {
            match ch {
                ChannelSpec::GilbertElliott { p_good, .. } => {
                    *p_good = v;
                    Ok(())
                }
                _ => Err(SimError::Config(
                    "p_gs/p_gc sweeps require a gilbert_elliott channel".into(),
                )),
            }
        };
        match self {
            SweepParam::UMax => {
                config.model.u_max = value;
                Ok(())
            }
            SweepParam::SensorP => set_bernoulli(&mut config.sensor, value),
            SweepParam::ControlP => set_bernoulli(&mut config.control, value),
            SweepParam::SensorGoodP => set_good(&mut config.sensor, value),
            SweepParam::ControlGoodP => set_good(&mut config.control, value),
        }
    }
}

/// One sweep cell: a parameter value, a policy variant, and its stats.
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub variant: String,
    pub stability: bool,
    pub stats: AggregateStats,
    pub paths: Vec<PathResult>,
}

/// Runs the cross product of values and policy variants. Moments are
/// re-estimated only when the swept parameter affects them (channel
/// probabilities do, the control authority does not).
pub fn sweep(
    base: &SimConfig,
    param: SweepParam,
    values: &[f64],
    variants: &[(PolicyKind, bool)],
) -> Result<Vec<SweepRow>, SimError> {
    if values.is_empty() {
        return Err(SimError::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    let base_moments = if param == SweepParam::UMax {
        // Moments are u_max-independent; estimate once.
        Some(crate::synthesis::estimate_moments(
            &base.model,
            &base.sensor,
            &base.control,
            base.sat.as_ref(),
            base.moment_samples,
            base.moment_seed,
        )?)
    } else {
        None
    };
    for &value in values {
        let mut moments_for_value: Option<OfflineMoments> = base_moments.clone();
        for &(policy, stability) in variants {
            let mut config = clone_config(base);
            config.policy = policy;
            config.stability_enabled = stability;
            param.apply(&mut config, value)?;
            if moments_for_value.is_none() {
                moments_for_value = Some(crate::synthesis::estimate_moments(
                    &config.model,
                    &config.sensor,
                    &config.control,
                    config.sat.as_ref(),
                    config.moment_samples,
                    config.moment_seed,
                )?);
            }
            let setup = config.prepare_with_moments(moments_for_value.clone().unwrap())?;
            let (stats, paths) = run_monte_carlo(&setup)?;
            rows.push(SweepRow {
                param: param.name(),
                value,
                variant: policy.name().to_string(),
                stability,
                stats,
                paths,
            });
        }
    }
    Ok(rows)
}

pub fn clone_config(base: &SimConfig) -> SimConfig {
    SimConfig {
        model: base.model.clone(),
        block_form: base.block_form,
        sensor: base.sensor.clone(),
        control: base.control.clone(),
        sat: crate::policy::saturator_by_name(base.sat.name(), base.sat.psi_max())
            .expect("saturator name is valid"),
        policy: base.policy,
        stability_enabled: base.stability_enabled,
        stability_r: base.stability_r,
        stability_zeta: base.stability_zeta,
        steps: base.steps,
        paths: base.paths,
        seed: base.seed,
        moment_samples: base.moment_samples,
        moment_seed: base.moment_seed,
        solver: base.solver,
    }
}
