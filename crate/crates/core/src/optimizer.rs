//! Multi-start quasi-Newton search over piecewise-constant couplings.
//!
//! Each restart runs BFGS with a strong-Wolfe line search inside the box
//! `[-g_max, g_max]`. Variables that reach a bound are frozen while the
//! gradient pushes them outward; steps are capped so iterates never leave
//! the box.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{final_occupation_with_gradient, mean_occupation, propagate_pulse_final, thermal_covariance};
use crate::error::{Error, Result};
use crate::fock::{build_system, swap_purity, swap_purity_with_gradient, FockSystem, DEFAULT_CUTOFF};
use crate::model::{ControlPulse, ModelParams};

/// Coupling bound: 5 in units of ω/2π.
pub const DEFAULT_G_MAX: f64 = 5.0 / (2.0 * std::f64::consts::PI);
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 500;
/// Value given to every restart-0 segment.
pub const FIRST_RESTART_G: f64 = 0.5;

/// Default restart count for a given number of segments per channel.
pub fn default_restarts(n_segments: usize) -> usize {
    if n_segments <= 10 {
        20
    } else {
        50
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    SwapPurity,
    FinalOccupation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    FiniteDifference,
    Analytic,
}

/// What to minimize and over which pulse family.
#[derive(Debug, Clone)]
pub struct Objective {
    kind: ObjectiveKind,
    params: ModelParams,
    n_segments: usize,
    total_time: f64,
    g_max: f64,
    system: Option<Arc<FockSystem>>,
}

impl Objective {
    /// Final `⟨a†a⟩` after `total_time` periods from the thermal state.
    pub fn occupation(params: ModelParams, n_segments: usize, total_time: f64) -> Result<Self> {
        check_shape(n_segments, total_time)?;
        Ok(Self {
            kind: ObjectiveKind::FinalOccupation,
            params,
            n_segments,
            total_time,
            g_max: DEFAULT_G_MAX,
            system: None,
        })
    }

    /// Negative target purity after a closed-system swap.
    pub fn swap(n_segments: usize, total_time: f64, cutoffs: (usize, usize)) -> Result<Self> {
        check_shape(n_segments, total_time)?;
        let system = build_system(cutoffs.0, cutoffs.1)?;
        Ok(Self {
            kind: ObjectiveKind::SwapPurity,
            params: ModelParams::single(0.0, 0.0, 0.0, 0.0)?,
            n_segments,
            total_time,
            g_max: DEFAULT_G_MAX,
            system: Some(Arc::new(system)),
        })
    }

    pub fn swap_default(n_segments: usize, total_time: f64) -> Result<Self> {
        Self::swap(n_segments, total_time, (DEFAULT_CUTOFF, DEFAULT_CUTOFF))
    }

    pub fn with_g_max(mut self, g_max: f64) -> Result<Self> {
        if !(g_max > 0.0 && g_max.is_finite()) {
            return Err(Error::Validation { field: "g_max".into(), reason: "must be positive".into() });
        }
        self.g_max = g_max;
        Ok(self)
    }

    /// Same objective with a different control time.
    pub fn with_total_time(&self, total_time: f64) -> Result<Self> {
        check_shape(self.n_segments, total_time)?;
        let mut o = self.clone();
        o.total_time = total_time;
        Ok(o)
    }

    /// Same objective with a different segment count.
    pub fn with_segments(&self, n_segments: usize) -> Result<Self> {
        check_shape(n_segments, self.total_time)?;
        let mut o = self.clone();
        o.n_segments = n_segments;
        Ok(o)
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    pub fn cutoffs(&self) -> Option<(usize, usize)> {
        self.system.as_ref().map(|s| (s.cutoff_target(), s.cutoff_aux()))
    }

    pub fn n_channels(&self) -> usize {
        match self.kind {
            ObjectiveKind::SwapPurity => 1,
            ObjectiveKind::FinalOccupation => self.params.n_aux_modes(),
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.n_segments * self.n_channels()
    }

    /// Channel-major values to a pulse.
    pub fn pulse(&self, g: &[f64]) -> Result<ControlPulse> {
        if g.len() != self.n_parameters() {
            return Err(Error::Arity { expected: self.n_parameters(), got: g.len() });
        }
        let channels: Vec<Vec<f64>> = g.chunks(self.n_segments).map(|c| c.to_vec()).collect();
        ControlPulse::uniform(&channels, self.total_time)
    }

    fn check_bounds(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.n_parameters() {
            return Err(Error::Arity { expected: self.n_parameters(), got: g.len() });
        }
        for (index, &value) in g.iter().enumerate() {
            if !value.is_finite() || value.abs() > self.g_max {
                return Err(Error::OutOfBounds { index, value, bound: self.g_max });
            }
        }
        Ok(())
    }

    /// `−purity` or final `⟨a†a⟩`.
    pub fn evaluate(&self, g: &[f64]) -> Result<f64> {
        self.check_bounds(g)?;
        let pulse = self.pulse(g)?;
        match self.kind {
            ObjectiveKind::SwapPurity => Ok(-swap_purity(self.system(), &pulse)?),
            ObjectiveKind::FinalOccupation => {
                let s = propagate_pulse_final(&self.params, &pulse, &thermal_covariance(&self.params))?;
                mean_occupation(&s)
            }
        }
    }

    /// Value and exact gradient.
    pub fn evaluate_with_gradient(&self, g: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_bounds(g)?;
        let pulse = self.pulse(g)?;
        match self.kind {
            ObjectiveKind::SwapPurity => {
                let (p, grad) = swap_purity_with_gradient(self.system(), &pulse)?;
                Ok((-p, grad.into_iter().map(|x| -x).collect()))
            }
            ObjectiveKind::FinalOccupation => final_occupation_with_gradient(&self.params, &pulse),
        }
    }

    /// Gradient by the requested method.
    pub fn gradient(&self, g: &[f64], method: GradientMethod) -> Result<Vec<f64>> {
        match method {
            GradientMethod::Analytic => Ok(self.evaluate_with_gradient(g)?.1),
            GradientMethod::FiniteDifference => {
                self.check_bounds(g)?;
                finite_difference_gradient(|x| self.evaluate(x), g, self.g_max)
            }
        }
    }

    fn system(&self) -> &FockSystem {
        self.system.as_deref().expect("swap objective carries its Fock system")
    }

    /// Internal objective: the log of the occupation (it spans many decades),
    /// the negative purity as is.
    fn internal(&self, g: &[f64], method: GradientMethod) -> Result<(f64, Vec<f64>)> {
        let (v, grad) = match method {
            GradientMethod::Analytic => self.evaluate_with_gradient(g)?,
            GradientMethod::FiniteDifference => (self.evaluate(g)?, self.gradient(g, method)?),
        };
        match self.kind {
            ObjectiveKind::SwapPurity => Ok((v, grad)),
            ObjectiveKind::FinalOccupation => {
                if !(v > 0.0) {
                    return Err(Error::Physicality(format!("non-positive occupation {v:e}")));
                }
                Ok((v.ln(), grad.into_iter().map(|x| x / v).collect()))
            }
        }
    }
}

fn check_shape(n_segments: usize, total_time: f64) -> Result<()> {
    if n_segments == 0 {
        return Err(Error::Validation { field: "n_segments".into(), reason: "must be at least 1".into() });
    }
    if !(total_time > 0.0 && total_time.is_finite()) {
        return Err(Error::Validation { field: "total_time".into(), reason: "must be positive".into() });
    }
    Ok(())
}

/// Central differences with step `max(1e-6 |x|, 1e-8)`; one-sided next to
/// the bound `±bound`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], bound: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut y = x.to_vec();
    let f0 = if x.iter().any(|v| v.abs() + (1e-6 * v.abs()).max(1e-8) > bound) { Some(f(x)?) } else { None };
    for i in 0..x.len() {
        let h = (1e-6 * x[i].abs()).max(1e-8);
        let up = x[i] + h <= bound;
        let dn = x[i] - h >= -bound;
        grad[i] = match (up, dn) {
            (true, true) => {
                y[i] = x[i] + h;
                let fp = f(&y)?;
                y[i] = x[i] - h;
                let fm = f(&y)?;
                (fp - fm) / (2.0 * h)
            }
            (true, false) => {
                y[i] = x[i] + h;
                (f(&y)? - f0.expect("computed near the bound")) / h
            }
            _ => {
                y[i] = x[i] - h;
                (f0.expect("computed near the bound") - f(&y)?) / h
            }
        };
        y[i] = x[i];
    }
    Ok(grad)
}

/// Settings shared by every restart.
#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    pub restarts: usize,
    pub seed: u64,
    pub gradient: GradientMethod,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Good-enough objective value. A restart stops when it gets there, and
    /// no new batch of `batch` restarts is launched once one has; batching
    /// keeps the outcome independent of the thread count.
    pub target: Option<f64>,
    pub batch: usize,
    /// Replaces the restart-0 starting point.
    pub warm_start: Option<Vec<f64>>,
}

impl OptimizeOptions {
    pub fn new(restarts: usize, seed: u64) -> Self {
        Self {
            restarts,
            seed,
            gradient: GradientMethod::Analytic,
            max_iterations: MAX_ITERATIONS,
            gradient_tolerance: GRADIENT_TOLERANCE,
            target: None,
            batch: 4,
            warm_start: None,
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_warm_start(mut self, g: Vec<f64>) -> Self {
        self.warm_start = Some(g);
        self
    }

    pub fn with_gradient(mut self, method: GradientMethod) -> Self {
        self.gradient = method;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizationResult {
    pub best_pulse: ControlPulse,
    pub best_values: Vec<f64>,
    /// Objective value (`−purity` or `⟨a†a⟩`) re-evaluated on `best_pulse`.
    pub best_value: f64,
    pub best_restart: usize,
    pub restarts_used: usize,
    pub iterations: Vec<usize>,
    /// Final value of each restart; `None` when it failed.
    pub restart_values: Vec<Option<f64>>,
    /// Projected gradient norm of the internal objective at the optimum.
    pub gradient_norm_final: f64,
    pub seed: u64,
    pub wall_time: f64,
}

/// Starting points: restart 0 at [`FIRST_RESTART_G`] (or the warm start), the
/// rest uniform in the box from one seeded stream, so the first `k` points
/// do not depend on how many restarts are requested.
pub fn initial_points(n: usize, g_max: f64, restarts: usize, seed: u64, warm: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(restarts);
    if restarts == 0 {
        return out;
    }
    out.push(match warm {
        Some(w) => w.to_vec(),
        None => vec![FIRST_RESTART_G.min(g_max); n],
    });
    for _ in 1..restarts {
        out.push((0..n).map(|_| rng.gen_range(-g_max..=g_max)).collect());
    }
    out
}

/// Run the multi-start search.
pub fn optimize(objective: &Objective, opts: &OptimizeOptions) -> Result<OptimizationResult> {
    let start = Instant::now();
    if opts.restarts == 0 {
        return Err(Error::Validation { field: "restarts".into(), reason: "must be at least 1".into() });
    }
    let n = objective.n_parameters();
    if let Some(w) = &opts.warm_start {
        objective.check_bounds(w)?;
    }
    let starts = initial_points(n, objective.g_max, opts.restarts, opts.seed, opts.warm_start.as_deref());
    let problem = ObjectiveProblem { objective, method: opts.gradient };
    let settings = Settings {
        max_iterations: opts.max_iterations,
        gradient_tolerance: opts.gradient_tolerance,
        target: opts.target.map(|t| internal_value(objective, t)),
    };

    let mut runs: Vec<Result<RestartOutcome>> = Vec::with_capacity(opts.restarts);
    let batch = opts.batch.max(1);
    for chunk in starts.chunks(batch) {
        let mut done: Vec<Result<RestartOutcome>> = chunk
            .par_iter()
            .map(|x0| {
                let x0 = repair_start(&problem, x0)?;
                let t = Instant::now();
                let r = minimize(&problem, &x0, &settings);
                if let Ok(o) = &r {
                    log::debug!(
                        "restart finished: value {:e} after {} iterations in {:.1}s",
                        external_value(objective, o.value),
                        o.iterations,
                        t.elapsed().as_secs_f64()
                    );
                }
                r
            })
            .collect();
        runs.append(&mut done);
        if let Some(target) = opts.target {
            let hit = runs.iter().flatten().any(|r| external_value(objective, r.value) <= target);
            if hit {
                break;
            }
        }
    }

    let mut best: Option<(usize, &RestartOutcome)> = None;
    for (i, r) in runs.iter().enumerate() {
        if let Ok(r) = r {
            if best.map_or(true, |(_, b)| r.value < b.value) {
                best = Some((i, r));
            }
        }
    }
    let Some((best_restart, outcome)) = best else {
        let reason = runs
            .iter()
            .filter_map(|r| r.as_ref().err())
            .map(|e| e.to_string())
            .next()
            .unwrap_or_default();
        return Err(Error::OptimizationFailed { restarts: runs.len(), reason });
    };
    for (i, r) in runs.iter().enumerate() {
        if let Err(e) = r {
            log::debug!("restart {i} failed: {e}");
        }
    }
    let best_value = objective.evaluate(&outcome.x)?;
    Ok(OptimizationResult {
        best_pulse: objective.pulse(&outcome.x)?,
        best_values: outcome.x.clone(),
        best_value,
        best_restart,
        restarts_used: runs.len(),
        iterations: runs.iter().map(|r| r.as_ref().map_or(0, |o| o.iterations)).collect(),
        restart_values: runs.iter().map(|r| r.as_ref().ok().map(|o| external_value(objective, o.value))).collect(),
        gradient_norm_final: outcome.gradient_norm,
        seed: opts.seed,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn internal_value(objective: &Objective, external: f64) -> f64 {
    match objective.kind {
        ObjectiveKind::SwapPurity => external,
        ObjectiveKind::FinalOccupation => external.max(f64::MIN_POSITIVE).ln(),
    }
}

fn external_value(objective: &Objective, internal: f64) -> f64 {
    match objective.kind {
        ObjectiveKind::SwapPurity => internal,
        ObjectiveKind::FinalOccupation => internal.exp(),
    }
}

/// Random starts deep in the unstable region can overflow the moment
/// equations; such points are pulled toward zero until they evaluate.
fn repair_start(problem: &ObjectiveProblem<'_>, x0: &[f64]) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut last = None;
    for _ in 0..40 {
        match problem.value(&x) {
            Ok(v) if v.is_finite() => return Ok(x),
            Ok(_) => {}
            Err(e) => last = Some(e),
        }
        x.iter_mut().for_each(|v| *v *= 0.5);
    }
    Err(last.unwrap_or_else(|| Error::Domain("no finite starting point".into())))
}

/// Best result for each control time, plus the overall argmin.
#[derive(Debug)]
pub struct TimeScan {
    pub times: Vec<f64>,
    pub results: Vec<Result<OptimizationResult>>,
    pub best: Option<usize>,
}

impl TimeScan {
    pub fn best_result(&self) -> Option<&OptimizationResult> {
        self.best.and_then(|i| self.results[i].as_ref().ok())
    }
}

/// Optimize at each control time on `time_grid`. Every time uses the same
/// seed so the scan is reproducible point by point.
pub fn optimize_over_time(template: &Objective, time_grid: &[f64], opts: &OptimizeOptions) -> Result<TimeScan> {
    if time_grid.is_empty() {
        return Err(Error::Validation { field: "time_grid".into(), reason: "must not be empty".into() });
    }
    let mut results = Vec::with_capacity(time_grid.len());
    for &t in time_grid {
        let obj = template.with_total_time(t)?;
        results.push(optimize(&obj, opts));
    }
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if let Ok(r) = r {
            let better = match best {
                None => true,
                Some(b) => r.best_value < results[b].as_ref().map(|x| x.best_value).unwrap_or(f64::INFINITY),
            };
            if better {
                best = Some(i);
            }
        }
    }
    Ok(TimeScan { times: time_grid.to_vec(), results, best })
}

/// A bounded minimization problem for [`minimize`].
pub trait Problem {
    fn dim(&self) -> usize;
    /// Symmetric box `[-bound, bound]` on every coordinate.
    fn bound(&self) -> f64;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

struct ObjectiveProblem<'a> {
    objective: &'a Objective,
    method: GradientMethod,
}

impl Problem for ObjectiveProblem<'_> {
    fn dim(&self) -> usize {
        self.objective.n_parameters()
    }

    fn bound(&self) -> f64 {
        self.objective.g_max
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let v = self.objective.evaluate(x)?;
        match self.objective.kind {
            ObjectiveKind::SwapPurity => Ok(v),
            ObjectiveKind::FinalOccupation if v > 0.0 => Ok(v.ln()),
            ObjectiveKind::FinalOccupation => Err(Error::Physicality(format!("non-positive occupation {v:e}"))),
        }
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.objective.internal(x, self.method)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Stop as soon as the internal objective reaches this value.
    pub target: Option<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        Self { max_iterations: MAX_ITERATIONS, gradient_tolerance: GRADIENT_TOLERANCE, target: None }
    }
}

/// Outcome of one restart.
#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Accepted value after every iteration, starting with the initial one.
    pub history: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.1;
const MAX_LINE_EVALS: usize = 30;
const STALL_ITERATIONS: usize = 5;
const STALL_TOLERANCE: f64 = 1e-13;

/// Zero the components that sit on a bound with the gradient pushing out.
fn projected(x: &DVector<f64>, g: &DVector<f64>, bound: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let at_hi = x[i] >= bound && g[i] < 0.0;
        let at_lo = x[i] <= -bound && g[i] > 0.0;
        if at_hi || at_lo {
            0.0
        } else {
            g[i]
        }
    })
}

/// Largest step along `d` that stays in the box.
fn max_step(x: &DVector<f64>, d: &DVector<f64>, bound: f64) -> f64 {
    let mut a = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 {
            a = a.min((bound - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            a = a.min((-bound - x[i]) / d[i]);
        }
    }
    a.max(0.0)
}

fn clamp_into(x: &DVector<f64>, bound: f64) -> DVector<f64> {
    x.map(|v| v.clamp(-bound, bound))
}

/// One BFGS restart from `x0`.
pub fn minimize<P: Problem + ?Sized>(problem: &P, x0: &[f64], settings: &Settings) -> Result<RestartOutcome> {
    let n = problem.dim();
    let bound = problem.bound();
    let mut x = clamp_into(&DVector::from_column_slice(x0), bound);
    let (f0, g0) = problem.value_and_gradient(x.as_slice())?;
    if !f0.is_finite() {
        return Err(Error::Domain("non-finite objective at the starting point".into()));
    }
    let mut f = f0;
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut history = vec![f];
    let mut iterations = 0;
    let mut stall = 0;

    while iterations < settings.max_iterations {
        if settings.target.is_some_and(|t| f <= t) {
            break;
        }
        let pg = projected(&x, &g, bound);
        if pg.norm() <= settings.gradient_tolerance {
            break;
        }
        let free: Vec<bool> = (0..n).map(|i| pg[i] != 0.0 || g[i] == 0.0).collect();
        let mut d = -(&h * &pg);
        for i in 0..n {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&pg) >= 0.0 {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = -pg.clone();
        }
        let a_max = max_step(&x, &d, bound);
        if a_max <= 0.0 {
            // Every descent coordinate is blocked; nothing left to do.
            break;
        }
        let a0 = if fresh { (1.0 / d.amax()).min(1.0) } else { 1.0 }.min(a_max);
        let step = line_search(problem, &x, f, &g, &d, a0, a_max, bound);
        let Some((alpha, f_new, g_new)) = step else {
            if fresh {
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let x_new = clamp_into(&(&x + &d * alpha), bound);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵗ) H (I − ρ y sᵗ) + ρ s sᵗ
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        let improvement = f - f_new;
        x = x_new;
        g = g_new;
        iterations += 1;
        if improvement <= STALL_TOLERANCE * f_new.abs().max(1.0) {
            stall += 1;
        } else {
            stall = 0;
        }
        f = f_new;
        history.push(f);
        if stall >= STALL_ITERATIONS {
            break;
        }
    }
    let gradient_norm = projected(&x, &g, bound).norm();
    Ok(RestartOutcome { x: x.as_slice().to_vec(), value: f, iterations, gradient_norm, history })
}

struct Trial {
    alpha: f64,
    f: f64,
    dphi: f64,
    g: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
fn line_search<P: Problem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    d: &DVector<f64>,
    a0: f64,
    a_max: f64,
    bound: f64,
) -> Option<(f64, f64, DVector<f64>)> {
    let dphi0 = g0.dot(d);
    if !(dphi0 < 0.0) {
        return None;
    }
    let mut evals = 0usize;
    let mut best_armijo: Option<Trial> = None;
    let probe = |alpha: f64, evals: &mut usize| -> Option<Trial> {
        *evals += 1;
        let xt = clamp_into(&(x + d * alpha), bound);
        match problem.value_and_gradient(xt.as_slice()) {
            Ok((f, g)) if f.is_finite() => {
                let g = DVector::from_vec(g);
                let dphi = g.dot(d);
                Some(Trial { alpha, f, dphi, g })
            }
            _ => None,
        }
    };
    let armijo = |t: &Trial| t.f <= f0 + C1 * t.alpha * dphi0;
    let wolfe = |t: &Trial| t.dphi.abs() <= -C2 * dphi0;
    let note = |t: &Trial, best: &mut Option<Trial>| {
        if t.f <= f0 + C1 * t.alpha * dphi0 && best.as_ref().map_or(true, |b| t.f < b.f) {
            *best = Some(Trial { alpha: t.alpha, f: t.f, dphi: t.dphi, g: t.g.clone() });
        }
    };

    // Bracketing phase.
    let mut lo = Trial { alpha: 0.0, f: f0, dphi: dphi0, g: g0.clone() };
    let mut alpha = a0;
    let hi: Trial;
    loop {
        if evals >= MAX_LINE_EVALS {
            return best_armijo.map(|t| (t.alpha, t.f, t.g));
        }
        let Some(t) = probe(alpha, &mut evals) else {
            // Failed evaluation: treat as a huge value and shrink.
            hi = Trial { alpha, f: f64::INFINITY, dphi: f64::INFINITY, g: g0.clone() };
            break;
        };
        note(&t, &mut best_armijo);
        if !armijo(&t) || (lo.alpha > 0.0 && t.f >= lo.f) {
            hi = t;
            break;
        }
        if wolfe(&t) {
            return Some((t.alpha, t.f, t.g));
        }
        if t.dphi >= 0.0 {
            hi = lo;
            lo = t;
            break;
        }
        if alpha >= a_max {
            // Box edge reached with sufficient decrease.
            return Some((t.alpha, t.f, t.g));
        }
        lo = t;
        alpha = (alpha * 2.0).min(a_max);
    }

    // Zoom between lo (sufficient decrease) and hi.
    let mut hi = hi;
    while evals < MAX_LINE_EVALS {
        let (a, b) = (lo.alpha, hi.alpha);
        let mut trial_alpha = if hi.f.is_finite() {
            // Minimizer of the quadratic through φ(lo), φ'(lo), φ(hi).
            let da = b - a;
            let denom = 2.0 * (hi.f - lo.f - lo.dphi * da);
            if denom > 0.0 {
                a - lo.dphi * da * da / denom
            } else {
                0.5 * (a + b)
            }
        } else {
            a + 0.25 * (b - a)
        };
        let (l, u) = if a < b { (a, b) } else { (b, a) };
        let margin = 0.1 * (u - l);
        if !(trial_alpha > l + margin && trial_alpha < u - margin) {
            trial_alpha = 0.5 * (a + b);
        }
        if (u - l) <= 1e-14 * u.max(1.0) {
            break;
        }
        let Some(t) = probe(trial_alpha, &mut evals) else {
            hi = Trial { alpha: trial_alpha, f: f64::INFINITY, dphi: f64::INFINITY, g: g0.clone() };
            continue;
        };
        note(&t, &mut best_armijo);
        if !armijo(&t) || t.f >= lo.f {
            hi = t;
        } else {
            if wolfe(&t) {
                return Some((t.alpha, t.f, t.g));
            }
            if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    best_armijo.map(|t| (t.alpha, t.f, t.g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Quadratic {
        a: DMatrix<f64>,
        b: DVector<f64>,
        bound: f64,
    }

    impl Problem for Quadratic {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn bound(&self) -> f64 {
            self.bound
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            let x = DVector::from_column_slice(x);
            Ok(0.5 * x.dot(&(&self.a * &x)) - self.b.dot(&x))
        }
        fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let v = self.value(x)?;
            let xv = DVector::from_column_slice(x);
            Ok((v, (&self.a * xv - &self.b).as_slice().to_vec()))
        }
    }

    fn quadratic(n: usize, seed: u64, bound: f64) -> Quadratic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(n, n);
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        Quadratic { a, b, bound }
    }

    #[test]
    fn convex_quadratic_reaches_exact_minimum() {
        for seed in 0..5 {
            let q = quadratic(5, seed, 100.0);
            let exact = q.a.clone().lu().solve(&q.b).unwrap();
            let r = minimize(&q, &[0.5; 5], &Settings::default()).unwrap();
            assert!(r.iterations <= 5 + 5, "iterations {}", r.iterations);
            let x = DVector::from_vec(r.x.clone());
            assert!((x - &exact).amax() < 1e-7);
        }
    }

    #[test]
    fn box_constraint_is_respected() {
        // Unconstrained minimum at x = 3 in every coordinate.
        let q = Quadratic { a: DMatrix::identity(3, 3), b: DVector::from_element(3, 3.0), bound: 1.0 };
        let r = minimize(&q, &[0.0; 3], &Settings::default()).unwrap();
        for v in &r.x {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
        assert!(r.gradient_norm <= GRADIENT_TOLERANCE);
    }

    #[test]
    fn finite_differences_of_linear_function_are_ones() {
        let f = |x: &[f64]| Ok(x.iter().sum::<f64>());
        let g = finite_difference_gradient(f, &[0.3, -1.2, 0.0, 4.9999999999, -5.0], 5.0).unwrap();
        for v in g {
            assert_relative_eq!(v, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn history_is_monotone() {
        let q = quadratic(8, 11, 2.0);
        let r = minimize(&q, &[1.5; 8], &Settings::default()).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    fn cooling() -> Objective {
        let p = ModelParams::single(1e-4, 10.0, 0.05, 0.0).unwrap();
        Objective::occupation(p, 4, 0.5).unwrap()
    }

    #[test]
    fn out_of_bounds_rejected() {
        let o = cooling();
        assert!(matches!(o.evaluate(&[0.0, 0.0, 5.5, 0.0]), Err(Error::OutOfBounds { index: 2, .. })));
        assert!(matches!(o.evaluate(&[0.0; 3]), Err(Error::Arity { .. })));
    }

    #[test]
    fn zero_pulse_leaves_thermal_occupation() {
        let o = cooling();
        let v = o.evaluate(&[0.0; 4]).unwrap();
        // Target damping at rate γ towards n_T keeps the value at n_T.
        assert_relative_eq!(v, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn closed_dynamics_conserve_excitation_in_rwa_limit() {
        // With no damping the counter-rotating terms can create pairs, so the
        // sum is conserved only for weak coupling over whole periods.
        let p = ModelParams::single(0.0, 10.0, 0.0, 0.0).unwrap();
        let pulse = ControlPulse::constant(&[1e-3], 4, 2.0).unwrap();
        let s = propagate_pulse_final(&p, &pulse, &thermal_covariance(&p)).unwrap();
        let total = mean_occupation(&s).unwrap() + s.aux_occupation(0);
        assert_relative_eq!(total, 10.0, max_relative = 1e-5);
    }

    #[test]
    fn gradients_agree() {
        let o = cooling();
        let g = [0.21, -0.4, 0.33, 0.05];
        let a = o.gradient(&g, GradientMethod::Analytic).unwrap();
        let f = o.gradient(&g, GradientMethod::FiniteDifference).unwrap();
        let diff: f64 = a.iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff <= 1e-4 * norm, "{a:?} vs {f:?}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let o = cooling();
        let g = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(o.evaluate(&g).unwrap(), o.evaluate(&g).unwrap());
    }

    #[test]
    fn optimizer_is_reproducible_and_beats_trivial_pulse() {
        let o = cooling();
        let opts = OptimizeOptions::new(3, 42);
        let a = optimize(&o, &opts).unwrap();
        let b = optimize(&o, &opts).unwrap();
        assert_eq!(a.best_values, b.best_values);
        assert_eq!(a.best_value, b.best_value);
        assert_eq!(a.iterations, b.iterations);
        assert!(a.best_value <= 10.0);
        assert_relative_eq!(a.best_value, o.evaluate(&a.best_values).unwrap(), max_relative = 1e-10);
    }

    #[test]
    fn more_restarts_never_hurt() {
        let o = cooling();
        let few = optimize(&o, &OptimizeOptions::new(2, 7)).unwrap();
        let many = optimize(&o, &OptimizeOptions::new(5, 7)).unwrap();
        assert!(many.best_value <= few.best_value);
        assert_eq!(&many.restart_values[..2], &few.restart_values[..]);
    }

    #[test]
    fn initial_points_share_prefix() {
        let a = initial_points(4, 5.0, 3, 9, None);
        let b = initial_points(4, 5.0, 6, 9, None);
        assert_eq!(a[..], b[..3]);
        assert_eq!(a[0], vec![FIRST_RESTART_G; 4]);
        assert!(b.iter().flatten().all(|v| v.abs() <= 5.0));
    }

    #[test]
    fn singleton_time_grid_matches_optimize() {
        let o = cooling();
        let opts = OptimizeOptions::new(2, 3);
        let scan = optimize_over_time(&o, &[0.5], &opts).unwrap();
        let direct = optimize(&o, &opts).unwrap();
        assert_eq!(scan.best, Some(0));
        assert_eq!(scan.best_result().unwrap().best_values, direct.best_values);
        assert!(optimize_over_time(&o, &[], &opts).is_err());
    }

    #[test]
    fn zero_restarts_rejected() {
        assert!(optimize(&cooling(), &OptimizeOptions::new(0, 1)).is_err());
    }
}
