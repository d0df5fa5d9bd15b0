//! Plant, cost and horizon description, plus the structural linear algebra
//! the rest of the crate is built on: assumption checks, the
//! orthogonal/Schur-stable state split, reachability matrices and the
//! stacked (lifted) dynamics and cost over one optimization horizon.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

/// Relative singular-value threshold used by every rank decision in the
/// crate. Deterministic and dimension-free.
pub const RANK_TOL: f64 = 1e-9;

/// Eigenvalues with `||λ| - 1| <= UNIT_BAND` count as unit-circle modes.
const UNIT_BAND: f64 = 1e-10;
/// Eigenvalues closer than this to the unit circle (but outside
/// `UNIT_BAND`) cannot be classified reliably from a computed spectrum.
const BORDERLINE_BAND: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-semi-simple unit-circle eigenvalue at {0:.6}{1:+.6}i")]
    NotSemiSimple(f64, f64),
    #[error("eigenvalue magnitude {0:.12} is within 1e-8 of the unit circle; supply an explicit block form")]
    BorderlineEigenvalue(f64),
    #[error("eigenvalue outside the closed unit disk (|λ| = {0:.6})")]
    UnstableEigenvalue(f64),
    #[error("orthogonal part unreachable: rank stays below {0} up to horizon {0}")]
    Unreachable(usize),
    #[error("block form rejected: {0}")]
    BadBlockForm(String),
    #[error("reachability horizon must be at least 1")]
    EmptyHorizon,
}

/// Plant, noise, cost and horizon data for one experiment.
///
/// The dynamics are `x_{t+1} = A x_t + B u_t + w_t`, `y_t = C x_t + v_t`
/// with `w ~ N(0, sigma_w)`, `v ~ N(0, sigma_meas)`, `x_0 ~ N(0, sigma_x0)`,
/// stage cost `|x|²_Q + |u|²_R`, terminal cost `|x|²_QN` and the hard bound
/// `|u|_inf <= u_max`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_meas: DMatrix<f64>,
    pub sigma_x0: DMatrix<f64>,
    pub cost_q: DMatrix<f64>,
    pub cost_qn: DMatrix<f64>,
    pub cost_r: DMatrix<f64>,
    pub u_max: f64,
    /// Optimization horizon N.
    pub horizon: usize,
    /// Recalculation interval N_r (steps between QP solves), 1 <= N_r <= N.
    pub recalc: usize,
}

impl SystemModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Hard errors on inconsistent dimensions; assumption checks are
    /// reported through [`validate`](Self::validate) instead.
    pub fn check_dims(&self) -> Result<(), ModelError> {
        let d = self.state_dim();
        let m = self.input_dim();
        let q = self.output_dim();
        let expect = |name: &str, mat: &DMatrix<f64>, r: usize, c: usize| {
            if mat.nrows() != r || mat.ncols() != c {
                Err(ModelError::Dimension(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    mat.nrows(),
                    mat.ncols()
                )))
            } else {
                Ok(())
            }
        };
        expect("A", &self.a, d, d)?;
        expect("B", &self.b, d, m)?;
        expect("C", &self.c, q, d)?;
        expect("sigma_w", &self.sigma_w, d, d)?;
        expect("sigma_meas", &self.sigma_meas, q, q)?;
        expect("sigma_x0", &self.sigma_x0, d, d)?;
        expect("Q", &self.cost_q, d, d)?;
        expect("Q_N", &self.cost_qn, d, d)?;
        expect("R", &self.cost_r, m, m)?;
        if self.u_max <= 0.0 {
            return Err(ModelError::Dimension("u_max must be positive".into()));
        }
        if self.horizon == 0 || self.recalc == 0 || self.recalc > self.horizon {
            return Err(ModelError::Dimension(format!(
                "need 1 <= N_r <= N, got N = {}, N_r = {}",
                self.horizon, self.recalc
            )));
        }
        Ok(())
    }

    /// Runs every model assumption as a structured pass/fail list.
    pub fn validate(&self) -> Result<ValidationReport, ModelError> {
        self.check_dims()?;
        let d = self.state_dim();
        let eigs = self.a.complex_eigenvalues();

        let mut checks = Vec::new();

        // Stabilizability via the PBH test on every non-(strictly)-stable mode.
        let stabilizable = eigs.iter().all(|&l| {
            if l.norm() < 1.0 - BORDERLINE_BAND {
                true
            } else {
                pbh_rank_full(&self.a, &self.b, l, PbhSide::Columns)
            }
        });
        checks.push(Check::new(
            "stabilizability",
            stabilizable,
            "PBH rank test on all modes with |λ| >= 1",
        ));

        // Observability via the dual PBH test on every mode.
        let observable = eigs
            .iter()
            .all(|&l| pbh_rank_full(&self.a, &self.c, l, PbhSide::Rows));
        checks.push(Check::new(
            "observability",
            observable,
            "PBH rank test on (A, C) for all modes",
        ));

        checks.push(Check::new(
            "measurement_noise_pd",
            is_positive_definite(&self.sigma_meas),
            "sigma_meas strictly positive definite",
        ));
        checks.push(Check::new(
            "control_weight_pd",
            is_positive_definite(&self.cost_r),
            "R strictly positive definite",
        ));

        let inside = eigs.iter().all(|l| l.norm() <= 1.0 + BORDERLINE_BAND);
        checks.push(Check::new(
            "eigenvalues_in_unit_disk",
            inside,
            "all eigenvalues of A inside the closed unit disk",
        ));

        let semisimple = unit_eigenvalue_clusters(&eigs).iter().all(|cl| {
            let geo = d - complex_shifted_rank(&self.a, cl.value);
            geo == cl.multiplicity
        });
        checks.push(Check::new(
            "unit_circle_semisimple",
            semisimple,
            "geometric multiplicity equals algebraic on the unit circle",
        ));

        Ok(ValidationReport { checks })
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: &'static str,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: &'static str) -> Self {
        Check { name, passed, detail }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

enum PbhSide {
    /// rank [A - λI, B] (stabilizability/controllability).
    Columns,
    /// rank [A - λI; C] (observability).
    Rows,
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|x| Complex::new(x, 0.0))
}

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// rank(A - λI) over the complex field.
fn complex_shifted_rank(a: &DMatrix<f64>, lambda: Complex<f64>) -> usize {
    let d = a.nrows();
    let mut m = to_complex(a);
    for i in 0..d {
        m[(i, i)] -= lambda;
    }
    complex_rank(&m)
}

fn pbh_rank_full(a: &DMatrix<f64>, other: &DMatrix<f64>, lambda: Complex<f64>, side: PbhSide) -> bool {
    let d = a.nrows();
    let mut shifted = to_complex(a);
    for i in 0..d {
        shifted[(i, i)] -= lambda;
    }
    let oc = to_complex(other);
    let stacked = match side {
        PbhSide::Columns => {
            let mut m = DMatrix::zeros(d, d + oc.ncols());
            m.view_mut((0, 0), (d, d)).copy_from(&shifted);
            m.view_mut((0, d), (d, oc.ncols())).copy_from(&oc);
            m
        }
        PbhSide::Rows => {
            let mut m = DMatrix::zeros(d + oc.nrows(), d);
            m.view_mut((0, 0), (d, d)).copy_from(&shifted);
            m.view_mut((d, 0), (oc.nrows(), d)).copy_from(&oc);
            m
        }
    };
    complex_rank(&stacked) == d
}

/// Strict positive definiteness via the smallest eigenvalue of the
/// symmetrized matrix.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return false;
    }
    let sym = (m + m.transpose()) * 0.5;
    let eigs = sym.symmetric_eigen().eigenvalues;
    let scale = eigs.amax().max(1.0);
    eigs.iter().all(|&e| e > RANK_TOL * scale)
}

/// Positive semidefiniteness with a small relative slack.
pub fn is_positive_semidefinite(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let sym = (m + m.transpose()) * 0.5;
    let eigs = sym.symmetric_eigen().eigenvalues;
    let scale = eigs.amax().max(1.0);
    eigs.iter().all(|&e| e > -1e-10 * scale)
}

struct UnitCluster {
    value: Complex<f64>,
    multiplicity: usize,
}

/// Groups unit-circle eigenvalues into clusters of (numerically) equal
/// values so algebraic multiplicities can be counted.
fn unit_eigenvalue_clusters(eigs: &DVector<Complex<f64>>) -> Vec<UnitCluster> {
    let mut clusters: Vec<UnitCluster> = Vec::new();
    for &l in eigs.iter() {
        if (l.norm() - 1.0).abs() > BORDERLINE_BAND {
            continue;
        }
        match clusters.iter_mut().find(|c| (c.value - l).norm() < 1e-7) {
            Some(c) => c.multiplicity += 1,
            None => clusters.push(UnitCluster { value: l, multiplicity: 1 }),
        }
    }
    clusters
}

/// Orthogonal/Schur-stable split of a Lyapunov-stable `A`.
///
/// `basis · blkdiag(a_orth, a_stable) · basis⁻¹ = A`, `a_orth` orthogonal,
/// `a_stable` with spectral radius < 1, and `kappa` the reachability index
/// of `(a_orth, b_orth)` (0 when the orthogonal part is empty).
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub a_orth: DMatrix<f64>,
    pub a_stable: DMatrix<f64>,
    pub b_orth: DMatrix<f64>,
    pub b_stable: DMatrix<f64>,
    pub basis: DMatrix<f64>,
    pub basis_inv: DMatrix<f64>,
    pub kappa: usize,
}

impl Decomposition {
    pub fn orth_dim(&self) -> usize {
        self.a_orth.nrows()
    }

    pub fn stable_dim(&self) -> usize {
        self.a_stable.nrows()
    }
}

/// The caller asserts that `A` is already block diagonal with a leading
/// `d_orth`-dimensional orthogonal block (the form both bundled example
/// systems use).
#[derive(Debug, Clone, Copy)]
pub struct BlockForm {
    pub d_orth: usize,
}

/// Splits the state space into the unit-circle (orthogonal) and strictly
/// stable parts.
///
/// With `given` the split is read off after verifying orthogonality and
/// stability of the blocks. Otherwise it is computed from a complex
/// eigendecomposition, building the orthogonal block out of exact rotation
/// blocks and ±1 entries.
pub fn decompose(model: &SystemModel, given: Option<BlockForm>) -> Result<Decomposition, ModelError> {
    model.check_dims()?;
    let d = model.state_dim();
    let m = model.input_dim();

    if let Some(bf) = given {
        let d_o = bf.d_orth;
        if d_o > d {
            return Err(ModelError::BadBlockForm(format!(
                "d_orth = {d_o} exceeds the state dimension {d}"
            )));
        }
        let d_s = d - d_o;
        let a_orth = model.a.view((0, 0), (d_o, d_o)).into_owned();
        let a_stable = model.a.view((d_o, d_o), (d_s, d_s)).into_owned();
        let scale = model.a.amax().max(1.0);
        let off1 = model.a.view((0, d_o), (d_o, d_s)).amax();
        let off2 = model.a.view((d_o, 0), (d_s, d_o)).amax();
        if off1.max(off2) > 1e-10 * scale {
            return Err(ModelError::BadBlockForm(
                "off-diagonal coupling blocks are not zero".into(),
            ));
        }
        let ortho_defect = (&a_orth.transpose() * &a_orth - DMatrix::identity(d_o, d_o)).amax();
        if ortho_defect > 1e-10 {
            return Err(ModelError::BadBlockForm(format!(
                "leading block is not orthogonal (defect {ortho_defect:.3e})"
            )));
        }
        if d_s > 0 {
            let rho = spectral_radius(&a_stable);
            if rho >= 1.0 - UNIT_BAND {
                return Err(ModelError::BadBlockForm(format!(
                    "trailing block is not Schur stable (ρ = {rho:.6})"
                )));
            }
        }
        let b_orth = model.b.view((0, 0), (d_o, m)).into_owned();
        let b_stable = model.b.view((d_o, 0), (d_s, m)).into_owned();
        let kappa = if d_o == 0 { 0 } else { reachability_index(&a_orth, &b_orth)? };
        return Ok(Decomposition {
            a_orth,
            a_stable,
            b_orth,
            b_stable,
            basis: DMatrix::identity(d, d),
            basis_inv: DMatrix::identity(d, d),
            kappa,
        });
    }

    // General path: classify the spectrum, then assemble the orthogonal
    // block from rotation blocks in the unit eigenspaces.
    let eigs = model.a.complex_eigenvalues();
    for &l in eigs.iter() {
        let mag = l.norm();
        if mag > 1.0 + BORDERLINE_BAND {
            return Err(ModelError::UnstableEigenvalue(mag));
        }
        if (mag - 1.0).abs() > UNIT_BAND && (mag - 1.0).abs() <= BORDERLINE_BAND {
            return Err(ModelError::BorderlineEigenvalue(mag));
        }
    }

    let clusters = unit_eigenvalue_clusters(&eigs);
    // Keep one representative per conjugate pair (positive imaginary part).
    let mut reps: Vec<&UnitCluster> = clusters.iter().filter(|c| c.value.im > 1e-9).collect();
    let reals: Vec<&UnitCluster> = clusters.iter().filter(|c| c.value.im.abs() <= 1e-9).collect();

    // Deterministic ordering: real eigenvalues first (descending), then
    // pairs by increasing angle.
    reps.sort_by(|a, b| a.value.arg().partial_cmp(&b.value.arg()).unwrap());

    let mut orth_cols: Vec<DVector<f64>> = Vec::new();
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();

    for cl in &reals {
        let lam = cl.value.re.signum();
        let basis_vecs = real_nullspace(&(model.a.clone() - DMatrix::identity(d, d) * lam));
        if basis_vecs.len() != cl.multiplicity {
            return Err(ModelError::NotSemiSimple(cl.value.re, cl.value.im));
        }
        for v in basis_vecs {
            orth_cols.push(v);
            blocks.push(DMatrix::from_element(1, 1, lam));
        }
    }
    for cl in &reps {
        let vecs = complex_nullspace(&model.a, cl.value);
        if vecs.len() != cl.multiplicity {
            return Err(ModelError::NotSemiSimple(cl.value.re, cl.value.im));
        }
        let (c, s) = (cl.value.re, cl.value.im);
        for v in vecs {
            let re: DVector<f64> = v.map(|z| z.re);
            let im: DVector<f64> = v.map(|z| z.im);
            orth_cols.push(re);
            orth_cols.push(im);
            // A [a b] = [a b] [[c, s], [-s, c]] for A(a+ib) = (c+is)(a+ib).
            blocks.push(DMatrix::from_row_slice(2, 2, &[c, s, -s, c]));
        }
    }

    let d_o: usize = blocks.iter().map(|b| b.nrows()).sum();
    let d_s = d - d_o;

    let mut a_orth = DMatrix::zeros(d_o, d_o);
    let mut at = 0;
    for blk in &blocks {
        let n = blk.nrows();
        a_orth.view_mut((at, at), (n, n)).copy_from(blk);
        at += n;
    }

    // Stable invariant subspace: the orthogonal complement of the span of
    // the unit-circle left eigenvectors.
    let mut left_cols: Vec<DVector<f64>> = Vec::new();
    let a_t = model.a.transpose();
    for cl in &reals {
        let lam = cl.value.re.signum();
        for v in real_nullspace(&(a_t.clone() - DMatrix::identity(d, d) * lam)) {
            left_cols.push(v);
        }
    }
    for cl in &reps {
        for v in complex_nullspace(&a_t, cl.value) {
            left_cols.push(v.map(|z| z.re));
            left_cols.push(v.map(|z| z.im));
        }
    }

    let v_s = if d_s == 0 {
        DMatrix::zeros(d, 0)
    } else if left_cols.is_empty() {
        DMatrix::identity(d, d)
    } else {
        let mut w = DMatrix::zeros(left_cols.len(), d);
        for (i, col) in left_cols.iter().enumerate() {
            w.row_mut(i).copy_from(&col.transpose());
        }
        let svd = w.svd(false, true);
        let vt = svd.v_t.expect("svd v_t requested");
        // Rows of vt beyond the rank span the orthogonal complement.
        let rank = {
            let smax = svd.singular_values.max();
            svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax.max(1.0)).count()
        };
        if vt.nrows() - rank < d_s {
            return Err(ModelError::BadBlockForm(
                "stable complement has deficient dimension".into(),
            ));
        }
        let mut vs = DMatrix::zeros(d, d_s);
        for j in 0..d_s {
            vs.column_mut(j).copy_from(&vt.row(rank + j).transpose());
        }
        vs
    };

    let a_stable = if d_s == 0 {
        DMatrix::zeros(0, 0)
    } else {
        v_s.transpose() * &model.a * &v_s
    };

    let mut basis = DMatrix::zeros(d, d);
    for (j, col) in orth_cols.iter().enumerate() {
        basis.column_mut(j).copy_from(col);
    }
    basis.view_mut((0, d_o), (d, d_s)).copy_from(&v_s);

    let basis_inv = basis
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| ModelError::BadBlockForm("eigenvector basis is singular".into()))?;

    // The similarity must reproduce A block-diagonally.
    let ablk = &basis_inv * &model.a * &basis;
    let mut expected = DMatrix::zeros(d, d);
    expected.view_mut((0, 0), (d_o, d_o)).copy_from(&a_orth);
    if d_s > 0 {
        expected.view_mut((d_o, d_o), (d_s, d_s)).copy_from(&a_stable);
    }
    if (&ablk - &expected).amax() > 1e-8 * model.a.amax().max(1.0) {
        return Err(ModelError::BadBlockForm(
            "computed eigenbasis does not block-diagonalize A".into(),
        ));
    }

    let bblk = &basis_inv * &model.b;
    let b_orth = bblk.view((0, 0), (d_o, m)).into_owned();
    let b_stable = bblk.view((d_o, 0), (d_s, m)).into_owned();
    let kappa = if d_o == 0 { 0 } else { reachability_index(&a_orth, &b_orth)? };

    Ok(Decomposition {
        a_orth,
        a_stable,
        b_orth,
        b_stable,
        basis,
        basis_inv,
        kappa,
    })
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

fn real_nullspace(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("svd v_t requested");
    let smax = svd.singular_values.max().max(1.0);
    let mut out = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= RANK_TOL * smax {
            out.push(vt.row(i).transpose());
        }
    }
    // Rows of v_t beyond the singular-value count also span the kernel
    // (tall/wide edge cases).
    for i in svd.singular_values.len()..vt.nrows() {
        out.push(vt.row(i).transpose());
    }
    out
}

fn complex_nullspace(a: &DMatrix<f64>, lambda: Complex<f64>) -> Vec<DVector<Complex<f64>>> {
    let d = a.nrows();
    let mut m = to_complex(a);
    for i in 0..d {
        m[(i, i)] -= lambda;
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("svd v_t requested");
    let smax = svd.singular_values.max().max(1.0);
    let mut out = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= RANK_TOL * smax {
            out.push(vt.row(i).map(|z| z.conj()).transpose());
        }
    }
    for i in svd.singular_values.len()..vt.nrows() {
        out.push(vt.row(i).map(|z| z.conj()).transpose());
    }
    out
}

/// `[A^{h-1} B  ...  A B  B]`, the h-step reachability matrix.
pub fn reachability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, h: usize) -> Result<DMatrix<f64>, ModelError> {
    if h == 0 {
        return Err(ModelError::EmptyHorizon);
    }
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n {
        return Err(ModelError::Dimension(format!(
            "reachability_matrix: A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let mut out = DMatrix::zeros(n, h * m);
    let mut power = b.clone();
    for k in 0..h {
        // Block k from the right is A^k B.
        out.view_mut((0, (h - 1 - k) * m), (n, m)).copy_from(&power);
        if k + 1 < h {
            power = a * &power;
        }
    }
    Ok(out)
}

pub fn matrix_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// Smallest `h` for which the h-step reachability matrix of the orthogonal
/// pair has full row rank.
pub fn reachability_index(a_orth: &DMatrix<f64>, b_orth: &DMatrix<f64>) -> Result<usize, ModelError> {
    let d_o = a_orth.nrows();
    if d_o == 0 {
        return Ok(0);
    }
    for h in 1..=d_o {
        let r = reachability_matrix(a_orth, b_orth, h)?;
        if matrix_rank(&r) == d_o {
            return Ok(h);
        }
    }
    Err(ModelError::Unreachable(d_o))
}

/// Lifted dynamics and cost over one optimization horizon.
///
/// `x_{t:N+1} = a_stack x_t + b_stack u_{t:N} + d_stack w_{t:N}` and
/// `V = |x_{t:N+1}|²_{q_stack} + |u_{t:N}|²_{r_stack}`, with
/// `alpha = b_stackᵀ q_stack b_stack + r_stack`,
/// `qa = a_stackᵀ q_stack b_stack`, `qd = d_stackᵀ q_stack b_stack`.
#[derive(Debug, Clone)]
pub struct StackedMatrices {
    pub a_stack: DMatrix<f64>,
    pub b_stack: DMatrix<f64>,
    pub d_stack: DMatrix<f64>,
    pub c_stack: DMatrix<f64>,
    pub q_stack: DMatrix<f64>,
    pub r_stack: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub qa: DMatrix<f64>,
    pub qd: DMatrix<f64>,
}

pub fn stack(model: &SystemModel) -> Result<StackedMatrices, ModelError> {
    model.check_dims()?;
    let d = model.state_dim();
    let m = model.input_dim();
    let q = model.output_dim();
    let n = model.horizon;

    // Powers of A up to N.
    let mut powers = Vec::with_capacity(n + 1);
    powers.push(DMatrix::identity(d, d));
    for k in 1..=n {
        powers.push(&powers[k - 1] * &model.a);
    }

    let mut a_stack = DMatrix::zeros((n + 1) * d, d);
    for k in 0..=n {
        a_stack.view_mut((k * d, 0), (d, d)).copy_from(&powers[k]);
    }

    let mut b_stack = DMatrix::zeros((n + 1) * d, n * m);
    let mut d_stack = DMatrix::zeros((n + 1) * d, n * d);
    for i in 1..=n {
        for j in 0..i {
            // Row block i, column block j holds A^{i-j-1} B (resp. A^{i-j-1}).
            let pw = &powers[i - j - 1];
            b_stack.view_mut((i * d, j * m), (d, m)).copy_from(&(pw * &model.b));
            d_stack.view_mut((i * d, j * d), (d, d)).copy_from(pw);
        }
    }

    let mut c_stack = DMatrix::zeros((n + 1) * q, (n + 1) * d);
    for k in 0..=n {
        c_stack.view_mut((k * q, k * d), (q, d)).copy_from(&model.c);
    }

    let mut q_stack = DMatrix::zeros((n + 1) * d, (n + 1) * d);
    for k in 0..n {
        q_stack.view_mut((k * d, k * d), (d, d)).copy_from(&model.cost_q);
    }
    q_stack.view_mut((n * d, n * d), (d, d)).copy_from(&model.cost_qn);

    let mut r_stack = DMatrix::zeros(n * m, n * m);
    for k in 0..n {
        r_stack.view_mut((k * m, k * m), (m, m)).copy_from(&model.cost_r);
    }

    let qb = &q_stack * &b_stack;
    let alpha = {
        let raw = b_stack.transpose() * &qb + &r_stack;
        (&raw + raw.transpose()) * 0.5
    };
    let qa = a_stack.transpose() * &qb;
    let qd = d_stack.transpose() * &qb;

    Ok(StackedMatrices {
        a_stack,
        b_stack,
        d_stack,
        c_stack,
        q_stack,
        r_stack,
        alpha,
        qa,
        qd,
    })
}

/// Moore-Penrose pseudo-inverse with the crate-wide rank tolerance.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let eps = RANK_TOL * svd.singular_values.max().max(1.0);
    svd.pseudo_inverse(eps).expect("svd computed with u and v_t")
}

/// Symmetric PSD square root with negative eigenvalue dust clamped to
/// zero; used to draw correlated Gaussians from covariance matrices.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..scaled.ncols() {
        let lambda = eig.eigenvalues[j].max(0.0);
        scaled.column_mut(j).scale_mut(lambda.sqrt());
    }
    scaled * eig.eigenvectors.transpose()
}

/// Largest singular value.
pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// The two §6-style example systems used throughout the tests live here so
/// test targets and presets agree on the exact numbers.
pub mod reference {
    use super::*;

    /// Four-dimensional plant: 3-dim orthogonal block (one fixed axis, one
    /// 90° rotation plane) plus a scalar 0.9 mode with no control authority.
    pub fn four_dim(u_max: f64) -> SystemModel {
        SystemModel {
            a: DMatrix::from_row_slice(4, 4, &[
                1.0, 0.0, 0.0, 0.0,
                0.0, 0.0, -1.0, 0.0,
                0.0, 1.0, 0.0, 0.0,
                0.0, 0.0, 0.0, 0.9,
            ]),
            b: DMatrix::from_row_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]),
            c: DMatrix::identity(4, 4),
            sigma_w: DMatrix::identity(4, 4) * 10.0,
            sigma_meas: DMatrix::identity(4, 4) * 10.0,
            sigma_x0: DMatrix::identity(4, 4),
            cost_q: DMatrix::identity(4, 4),
            cost_qn: DMatrix::identity(4, 4),
            cost_r: DMatrix::from_element(1, 1, 1.0),
            u_max,
            horizon: 5,
            recalc: 3,
        }
    }

    /// Three-dimensional plant with an orthogonal A (no stable part).
    pub fn three_dim(recalc: usize) -> SystemModel {
        SystemModel {
            a: DMatrix::from_row_slice(3, 3, &[
                0.0, -0.80, -0.60,
                0.80, -0.36, 0.48,
                0.60, 0.48, -0.64,
            ]),
            b: DMatrix::from_row_slice(3, 1, &[0.16, 0.12, 0.14]),
            c: DMatrix::identity(3, 3),
            sigma_w: DMatrix::identity(3, 3) * 2.0,
            sigma_meas: DMatrix::identity(3, 3) * 10.0,
            sigma_x0: DMatrix::identity(3, 3),
            cost_q: DMatrix::identity(3, 3),
            cost_qn: DMatrix::from_row_slice(3, 3, &[
                12.0, -0.1, -0.4,
                -0.1, 19.0, -0.2,
                -0.4, -0.2, 2.0,
            ]),
            cost_r: DMatrix::from_element(1, 1, 2.0),
            u_max: 15.0,
            horizon: 4,
            recalc,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn four_dim_reference_passes_all_checks() {
        let report = reference::four_dim(5.0).validate().unwrap();
        assert!(report.all_passed(), "failed: {:?}", report.failed());
    }

    #[test]
    fn scalar_unstable_fails_eigenvalue_location() {
        let report = scalar_model(2.0, 1.0).validate().unwrap();
        assert!(!report.check("eigenvalues_in_unit_disk").unwrap().passed);
    }

    #[test]
    fn jordan_block_fails_semisimplicity() {
        let mut m = scalar_model(1.0, 1.0);
        m.a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        m.b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        m.c = DMatrix::identity(2, 2);
        m.sigma_w = DMatrix::identity(2, 2);
        m.sigma_meas = DMatrix::identity(2, 2);
        m.sigma_x0 = DMatrix::identity(2, 2);
        m.cost_q = DMatrix::identity(2, 2);
        m.cost_qn = DMatrix::identity(2, 2);
        let report = m.validate().unwrap();
        assert!(!report.check("unit_circle_semisimple").unwrap().passed);
    }

    #[test]
    fn reference_decomposition_block_form() {
        let model = reference::four_dim(5.0);
        let dec = decompose(&model, Some(BlockForm { d_orth: 3 })).unwrap();
        assert_eq!(dec.orth_dim(), 3);
        assert_eq!(dec.stable_dim(), 1);
        assert_eq!(dec.kappa, 3);
        let r3 = reachability_matrix(&dec.a_orth, &dec.b_orth, 3).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[
            1.0, 1.0, 1.0,
            0.0, -1.0, 0.0,
            -1.0, 0.0, 1.0,
        ]);
        assert!((r3 - expected).amax() < 1e-12);
    }

    #[test]
    fn orthogonal_a_has_no_stable_part() {
        let model = reference::three_dim(3);
        let dec = decompose(&model, None).unwrap();
        assert_eq!(dec.orth_dim(), 3);
        assert_eq!(dec.stable_dim(), 0);
        assert_eq!(dec.kappa, 3);
        // basis · blkdiag · basis⁻¹ must reproduce A.
        let recomposed = &dec.basis
            * DMatrix::from_fn(3, 3, |i, j| dec.a_orth[(i, j)])
            * &dec.basis_inv;
        assert!((recomposed - &model.a).amax() < 1e-8);
    }

    #[test]
    fn strictly_stable_a_has_no_orthogonal_part() {
        let mut model = scalar_model(0.5, 1.0);
        model.a = DMatrix::identity(2, 2) * 0.5;
        model.b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        model.c = DMatrix::identity(2, 2);
        model.sigma_w = DMatrix::identity(2, 2);
        model.sigma_meas = DMatrix::identity(2, 2);
        model.sigma_x0 = DMatrix::identity(2, 2);
        model.cost_q = DMatrix::identity(2, 2);
        model.cost_qn = DMatrix::identity(2, 2);
        let dec = decompose(&model, None).unwrap();
        assert_eq!(dec.orth_dim(), 0);
        assert_eq!(dec.stable_dim(), 2);
        assert_eq!(dec.kappa, 0);
    }

    #[test]
    fn borderline_eigenvalue_is_rejected() {
        let model = scalar_model(1.0 - 5e-9, 1.0);
        match decompose(&model, None) {
            Err(ModelError::BorderlineEigenvalue(_)) => {}
            other => panic!("expected borderline error, got {other:?}"),
        }
    }

    #[test]
    fn reachability_matrix_basics() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let r1 = reachability_matrix(&a, &b, 1).unwrap();
        assert_eq!(r1, b);
        let r2 = reachability_matrix(&a, &b, 2).unwrap();
        assert!((r2 - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn reachability_index_examples() {
        let one = DMatrix::identity(1, 1);
        assert_eq!(reachability_index(&one, &one).unwrap(), 1);
        let model = reference::three_dim(3);
        assert_eq!(reachability_index(&model.a, &model.b).unwrap(), 3);
        // Brute-force cross-check of the rank profile.
        for h in 1..=3 {
            let r = reachability_matrix(&model.a, &model.b, h).unwrap();
            let rank = matrix_rank(&r);
            if h < 3 {
                assert!(rank < 3, "rank {rank} at h = {h}");
            } else {
                assert_eq!(rank, 3);
            }
        }
    }

    #[test]
    fn stack_scalar_integrator() {
        let model = scalar_model(1.0, 1.0);
        let st = stack(&model).unwrap();
        let expected_b = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        assert!((st.b_stack.clone() - expected_b).amax() < 1e-15);
        assert!((st.a_stack.view((0, 0), (1, 1)).into_owned() - DMatrix::identity(1, 1)).amax() < 1e-15);
        let expected_alpha = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        assert!((st.alpha.clone() - expected_alpha).amax() < 1e-12);
    }
}
