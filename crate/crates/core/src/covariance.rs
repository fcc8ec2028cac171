//! Second-moment dynamics of the target and its auxiliaries.
//!
//! With `x = (a, a†, b₁, b₁†[, b₂, b₂†])ᵗ` the ordered moments `C = ⟨x xᵗ⟩`
//! obey the linear equation
//!
//! ```text
//! dC/dt = A C + C Aᵗ + G
//! ```
//!
//! where `Aᵗ` is the plain (not conjugate) transpose. First moments vanish for
//! the thermal inputs used here and stay zero, so `C` is also the covariance.
//!
//! For piecewise-constant couplings each segment is solved exactly: with
//! `Φ = exp(A Δt)` and the Van Loan block exponential
//!
//! ```text
//! exp([[A, G], [0, -Aᵗ]] Δt) = [[Φ, F], [0, exp(-Aᵗ Δt)]]
//! ```
//!
//! the update is `C ← Φ C Φᵗ + F Φᵗ`.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, C64, I, ONE};
use crate::model::{periods_to_radians, ControlPulse, ModelParams};

/// Moments larger than this abort propagation.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Tolerance on `|Im ⟨a†a⟩|`, scaled by `max(1, |Re ⟨a†a⟩|)`.
pub const IMAG_TOLERANCE: f64 = 1e-8;

/// Trajectory samples per target period.
pub const SAMPLES_PER_PERIOD: usize = 50;

/// Dimension `2(1 + M)` of the moment vector.
pub fn dimension(params: &ModelParams) -> usize {
    2 * (1 + params.n_aux_modes())
}

/// Ordered second moments at a given time (periods).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    matrix: CMat,
    time: f64,
}

impl CovarianceState {
    pub fn new(matrix: CMat, time: f64) -> Result<Self> {
        let d = matrix.nrows();
        if d != matrix.ncols() || d < 4 || d % 2 != 0 || d > 6 {
            return Err(Error::Dimension(format!(
                "covariance must be 4x4 or 6x6, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { matrix, time })
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_aux_modes(&self) -> usize {
        self.dim() / 2 - 1
    }

    /// `⟨m m†⟩ − ⟨m† m⟩` for mode `mode` (0 = target). Equals 1 for a
    /// physical state.
    pub fn commutator(&self, mode: usize) -> C64 {
        let i = 2 * mode;
        self.matrix[(i, i + 1)] - self.matrix[(i + 1, i)]
    }

    /// `⟨b_j† b_j⟩` for auxiliary `j` (0-based).
    pub fn aux_occupation(&self, j: usize) -> f64 {
        let i = 2 * (j + 1);
        self.matrix[(i + 1, i)].re
    }
}

/// Drift and diffusion matrices for one set of constant couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftDiffusion {
    pub drift: CMat,
    pub diffusion: CMat,
}

impl DriftDiffusion {
    pub fn new(params: &ModelParams, g: &[f64]) -> Result<Self> {
        Ok(Self { drift: build_drift(params, g)?, diffusion: build_diffusion(params) })
    }
}

/// Drift matrix `A`. Each auxiliary couples to the target only, with its own
/// rate `g[j]`; auxiliaries are mutually uncoupled.
pub fn build_drift(params: &ModelParams, g: &[f64]) -> Result<CMat> {
    let m = params.n_aux_modes();
    if g.len() != m {
        return Err(Error::Arity { expected: m, got: g.len() });
    }
    let d = 2 * (1 + m);
    let w = params.omega();
    let mut a = CMat::zeros(d, d);
    a[(0, 0)] = c(-params.gamma() / 2.0, -w);
    a[(1, 1)] = c(-params.gamma() / 2.0, w);
    for (j, aux) in params.auxiliaries().iter().enumerate() {
        let b = 2 * (j + 1);
        a[(b, b)] = c(-aux.kappa / 2.0, -w);
        a[(b + 1, b + 1)] = c(-aux.kappa / 2.0, w);
        let ig = I * g[j];
        for col in [b, b + 1] {
            a[(0, col)] = -ig;
            a[(1, col)] = ig;
        }
        for col in [0, 1] {
            a[(b, col)] = -ig;
            a[(b + 1, col)] = ig;
        }
    }
    Ok(a)
}

/// `∂A/∂g_j`: the coupling pattern of auxiliary `j` with unit rate.
fn drift_derivative(d: usize, j: usize) -> CMat {
    let mut a = CMat::zeros(d, d);
    let b = 2 * (j + 1);
    for col in [b, b + 1] {
        a[(0, col)] = -I;
        a[(1, col)] = I;
    }
    for col in [0, 1] {
        a[(b, col)] = -I;
        a[(b + 1, col)] = I;
    }
    a
}

/// Diffusion matrix `G`; independent of the couplings.
pub fn build_diffusion(params: &ModelParams) -> CMat {
    let d = dimension(params);
    let mut g = CMat::zeros(d, d);
    let (gamma, n_t) = (params.gamma(), params.n_t());
    g[(0, 1)] = c(gamma * (n_t + 1.0), 0.0);
    g[(1, 0)] = c(gamma * n_t, 0.0);
    for (j, aux) in params.auxiliaries().iter().enumerate() {
        let b = 2 * (j + 1);
        g[(b, b + 1)] = c(aux.kappa * (aux.n_aux + 1.0), 0.0);
        g[(b + 1, b)] = c(aux.kappa * aux.n_aux, 0.0);
    }
    g
}

/// Uncoupled thermal state: target at `n_T`, each auxiliary at its `n_aux`.
pub fn thermal_covariance(params: &ModelParams) -> CovarianceState {
    let d = dimension(params);
    let mut m = CMat::zeros(d, d);
    m[(0, 1)] = c(params.n_t() + 1.0, 0.0);
    m[(1, 0)] = c(params.n_t(), 0.0);
    for (j, aux) in params.auxiliaries().iter().enumerate() {
        let b = 2 * (j + 1);
        m[(b, b + 1)] = c(aux.n_aux + 1.0, 0.0);
        m[(b + 1, b)] = c(aux.n_aux, 0.0);
    }
    CovarianceState { matrix: m, time: 0.0 }
}

/// Thermal-like state with an arbitrary target occupation and the auxiliaries
/// from `params`.
pub fn diagonal_covariance(params: &ModelParams, n_target: f64) -> CovarianceState {
    let mut s = thermal_covariance(params);
    s.matrix[(0, 1)] = c(n_target + 1.0, 0.0);
    s.matrix[(1, 0)] = c(n_target, 0.0);
    s
}

/// Exact one-segment map `C ↦ Φ C Φᵗ + Q` for constant `A`, `G`.
#[derive(Debug, Clone)]
pub struct SegmentMap {
    pub phi: CMat,
    pub q: CMat,
}

impl SegmentMap {
    /// `dt` in radian time.
    pub fn new(drift: &CMat, diffusion: &CMat, dt: f64) -> Self {
        let d = drift.nrows();
        let block = van_loan_block(drift, diffusion, dt);
        let e = linalg::expm(&block);
        let phi = e.view((0, 0), (d, d)).into_owned();
        let f = e.view((0, d), (d, d)).into_owned();
        let q = &f * phi.transpose();
        Self { phi, q }
    }

    pub fn apply(&self, c: &CMat) -> CMat {
        &self.phi * c * self.phi.transpose() + &self.q
    }
}

fn van_loan_block(drift: &CMat, diffusion: &CMat, dt: f64) -> CMat {
    let d = drift.nrows();
    let mut m = CMat::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&(drift * c(dt, 0.0)));
    m.view_mut((0, d), (d, d)).copy_from(&(diffusion * c(dt, 0.0)));
    m.view_mut((d, d), (d, d)).copy_from(&(drift.transpose() * c(-dt, 0.0)));
    m
}

fn check_finite(m: &CMat, segment: usize) -> Result<()> {
    let mut worst = 0.0f64;
    for z in m.iter() {
        let n = z.norm();
        if !n.is_finite() {
            return Err(Error::Divergence { segment, magnitude: f64::INFINITY });
        }
        worst = worst.max(n);
    }
    if worst > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { segment, magnitude: worst });
    }
    Ok(())
}

/// Advance `state` by `dt` periods under constant `A`, `G`.
pub fn propagate_segment(
    state: &CovarianceState,
    drift: &CMat,
    diffusion: &CMat,
    dt: f64,
) -> Result<CovarianceState> {
    propagate_segment_indexed(state, drift, diffusion, dt, 0)
}

fn propagate_segment_indexed(
    state: &CovarianceState,
    drift: &CMat,
    diffusion: &CMat,
    dt: f64,
    segment: usize,
) -> Result<CovarianceState> {
    if !(dt > 0.0) {
        return Err(Error::Validation { field: "dt", reason: format!("{dt} is not positive") });
    }
    let map = SegmentMap::new(drift, diffusion, periods_to_radians(dt));
    let matrix = map.apply(&state.matrix);
    check_finite(&matrix, segment)?;
    Ok(CovarianceState { matrix, time: state.time + dt })
}

/// Same update computed from the vectorized affine system
/// `d/dt [vec C; 1] = [[A⊗I + I⊗A, vec G], [0, 0]] [vec C; 1]`.
/// Slower than [`propagate_segment`]; kept as an independent route.
pub fn propagate_segment_vectorized(
    state: &CovarianceState,
    drift: &CMat,
    diffusion: &CMat,
    dt: f64,
) -> Result<CovarianceState> {
    let d = drift.nrows();
    let n = d * d;
    let mut m = CMat::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&lyapunov_operator(drift));
    let g = linalg::vec_row_major(diffusion);
    m.view_mut((0, n), (n, 1)).copy_from(&g);
    let e = linalg::expm(&(m * c(periods_to_radians(dt), 0.0)));
    let mut y = DVector::<C64>::zeros(n + 1);
    y.rows_mut(0, n).copy_from(&linalg::vec_row_major(&state.matrix));
    y[n] = ONE;
    let y = e * y;
    let matrix = linalg::unvec_row_major(&y.as_slice()[..n], d, d);
    check_finite(&matrix, 0)?;
    Ok(CovarianceState { matrix, time: state.time + dt })
}

/// Row-major matrix of `C ↦ A C + C Aᵗ`.
pub fn lyapunov_operator(drift: &CMat) -> CMat {
    let d = drift.nrows();
    let id = CMat::identity(d, d);
    drift.kronecker(&id) + id.kronecker(drift)
}

/// One sample of a moment trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    /// Time in periods.
    pub time: f64,
    /// `⟨a†a⟩`.
    pub n_target: f64,
    /// `⟨b_j†b_j⟩` per auxiliary.
    pub n_aux: Vec<f64>,
}

impl TrajectoryPoint {
    fn from_state(s: &CovarianceState) -> Self {
        Self {
            time: s.time,
            n_target: s.matrix[(1, 0)].re,
            n_aux: (0..s.n_aux_modes()).map(|j| s.aux_occupation(j)).collect(),
        }
    }
}

fn check_arity(params: &ModelParams, pulse: &ControlPulse) -> Result<()> {
    if pulse.n_channels() != params.n_aux_modes() {
        return Err(Error::Arity { expected: params.n_aux_modes(), got: pulse.n_channels() });
    }
    Ok(())
}

/// Chain segment updates over a whole pulse; returns the final state and
/// `⟨a†a⟩` sampled uniformly (at least [`SAMPLES_PER_PERIOD`] per period,
/// both end points included).
pub fn propagate_pulse(
    params: &ModelParams,
    pulse: &ControlPulse,
    initial: &CovarianceState,
) -> Result<(CovarianceState, Vec<TrajectoryPoint>)> {
    check_arity(params, pulse)?;
    let diffusion = build_diffusion(params);
    let total = pulse.total_time();
    let n_samples = ((SAMPLES_PER_PERIOD as f64 * total).ceil() as usize).max(1);
    let sample_dt = total / n_samples as f64;

    let mut trajectory = vec![TrajectoryPoint::from_state(initial)];
    let mut next_sample = 1usize;
    let mut state = initial.clone();
    let t0 = initial.time;
    let mut seg_start = 0.0;
    let pieces = pulse.aligned_pieces();
    let last = pieces.len() - 1;
    for (k, (duration, g)) in pieces.iter().enumerate() {
        let drift = build_drift(params, g)?;
        let seg_end = if k == last { total } else { seg_start + duration };
        while next_sample <= n_samples {
            let ts = next_sample as f64 * sample_dt;
            if ts > seg_end && !(k == last && next_sample == n_samples) {
                break;
            }
            let dt = ts - seg_start;
            let s = if dt > 0.0 {
                propagate_segment_indexed(&state, &drift, &diffusion, dt, k)?
            } else {
                state.clone()
            };
            let mut p = TrajectoryPoint::from_state(&s);
            p.time = t0 + ts;
            trajectory.push(p);
            next_sample += 1;
        }
        state = propagate_segment_indexed(&state, &drift, &diffusion, *duration, k)?;
        seg_start = seg_end;
    }
    state.time = t0 + total;
    Ok((state, trajectory))
}

/// Final state only; no trajectory sampling.
pub fn propagate_pulse_final(
    params: &ModelParams,
    pulse: &ControlPulse,
    initial: &CovarianceState,
) -> Result<CovarianceState> {
    check_arity(params, pulse)?;
    let diffusion = build_diffusion(params);
    let mut state = initial.clone();
    for (k, (duration, g)) in pulse.aligned_pieces().iter().enumerate() {
        let drift = build_drift(params, g)?;
        state = propagate_segment_indexed(&state, &drift, &diffusion, *duration, k)?;
    }
    Ok(state)
}

/// `⟨a†a⟩ = Re C[1,0]`, rejecting states with a non-negligible imaginary part.
pub fn mean_occupation(state: &CovarianceState) -> Result<f64> {
    let z = state.matrix[(1, 0)];
    if z.im.abs() > IMAG_TOLERANCE * z.re.abs().max(1.0) {
        return Err(Error::Physicality(format!("Im⟨a†a⟩ = {:e}", z.im)));
    }
    Ok(z.re)
}

/// Stationary moments for constant couplings, from the vectorized system
/// `(A⊗I + I⊗A) vec C = −vec G`.
pub fn steady_state(params: &ModelParams, g: &[f64]) -> Result<CovarianceState> {
    let drift = build_drift(params, g)?;
    let diffusion = build_diffusion(params);
    steady_state_of(&drift, &diffusion)
}

pub fn steady_state_of(drift: &CMat, diffusion: &CMat) -> Result<CovarianceState> {
    let ev = linalg::rightmost_eigenvalue(drift)
        .ok_or_else(|| Error::Consistency("Schur decomposition did not converge".into()))?;
    if !(ev.re < 0.0) {
        return Err(Error::NoSteadyState { re: ev.re, im: ev.im });
    }
    let d = drift.nrows();
    let l = lyapunov_operator(drift);
    let rhs = -linalg::vec_row_major(diffusion);
    let lu = l.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Consistency("singular Lyapunov operator".into()))?;
    // One step of iterative refinement.
    let r = &rhs - &l * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let matrix = linalg::unvec_row_major(x.as_slice(), d, d);
    check_finite(&matrix, 0)?;
    Ok(CovarianceState { matrix, time: 0.0 })
}

/// Residual `‖A C + C Aᵗ + G‖_F`.
pub fn lyapunov_residual(drift: &CMat, diffusion: &CMat, c: &CMat) -> f64 {
    linalg::fro(&(drift * c + c * drift.transpose() + diffusion))
}

/// Final `⟨a†a⟩` from the thermal state and its gradient with respect to
/// every segment value (channel-major), by forward sensitivities of the
/// segment exponentials and a backward adjoint sweep.
///
/// All channels must share the same segmentation.
pub fn final_occupation_with_gradient(
    params: &ModelParams,
    pulse: &ControlPulse,
) -> Result<(f64, Vec<f64>)> {
    check_arity(params, pulse)?;
    let m = params.n_aux_modes();
    let n = pulse.n_segments();
    let channels = pulse.channels();
    for ch in channels {
        if ch.len() != n || ch.iter().zip(&channels[0]).any(|(a, b)| a.duration != b.duration) {
            return Err(Error::Unsupported("gradient needs a common segmentation".into()));
        }
    }
    let d = dimension(params);
    let diffusion = build_diffusion(params);
    let derivs: Vec<CMat> = (0..m).map(|j| drift_derivative(d, j)).collect();

    // Forward sweep, keeping the inputs of every segment.
    let mut states = Vec::with_capacity(n + 1);
    let mut maps = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(n);
    states.push(thermal_covariance(params).matrix);
    for k in 0..n {
        let g: Vec<f64> = channels.iter().map(|ch| ch[k].g).collect();
        let drift = build_drift(params, &g)?;
        let dt = periods_to_radians(channels[0][k].duration);
        let block = van_loan_block(&drift, &diffusion, dt);
        let e = linalg::expm(&block);
        let phi = e.view((0, 0), (d, d)).into_owned();
        let f = e.view((0, d), (d, d)).into_owned();
        let q = &f * phi.transpose();
        let map = SegmentMap { phi, q };
        let next = map.apply(&states[k]);
        check_finite(&next, k)?;
        states.push(next);
        maps.push((map, f));
        blocks.push((block, dt));
    }
    let last = &states[n];
    let value = CovarianceState { matrix: last.clone(), time: 0.0 };
    let value = mean_occupation(&value)?;

    // Backward sweep: W_k = Φ_kᵗ W_{k+1} Φ_k, objective = Re Σ W∘C.
    let mut w = CMat::zeros(d, d);
    w[(1, 0)] = ONE;
    let mut grad = vec![0.0; m * n];
    for k in (0..n).rev() {
        let (map, f) = &maps[k];
        let (block, dt) = &blocks[k];
        for (j, dj) in derivs.iter().enumerate() {
            let mut dblock = CMat::zeros(2 * d, 2 * d);
            dblock.view_mut((0, 0), (d, d)).copy_from(&(dj * c(*dt, 0.0)));
            dblock.view_mut((d, d), (d, d)).copy_from(&(dj.transpose() * c(-*dt, 0.0)));
            let de = block_derivative(block, &dblock);
            let dphi = de.view((0, 0), (d, d)).into_owned();
            let df = de.view((0, d), (d, d)).into_owned();
            let dq = &df * map.phi.transpose() + f * dphi.transpose();
            let ck = &states[k];
            let dc = &dphi * ck * map.phi.transpose() + &map.phi * ck * dphi.transpose() + dq;
            let s: C64 = w.iter().zip(dc.iter()).map(|(a, b)| a * b).sum();
            grad[j * n + k] = s.re;
        }
        w = map.phi.transpose() * &w * &map.phi;
    }
    Ok((value, grad))
}

/// Directional derivative of `exp(M)` along `dM`, read off the upper-right
/// block of `exp([[M, dM], [0, M]])`.
fn block_derivative(m: &CMat, dm: &CMat) -> CMat {
    let n = m.nrows();
    let mut big = CMat::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(m);
    big.view_mut((0, n), (n, n)).copy_from(dm);
    big.view_mut((n, n), (n, n)).copy_from(m);
    let e = linalg::expm(&big);
    e.view((0, n), (n, n)).into_owned()
}
