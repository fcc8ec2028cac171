//! Thermal-bath master equation on the truncated product space.
//!
//! ```text
//! dρ/dt = −i[H(g), ρ] + γ(n_T+1) D[a]ρ + γ n_T D[a†]ρ
//!                     + κ(n_aux+1) D[b]ρ + κ n_aux D[b†]ρ
//! D[L]ρ = L ρ L† − ½{L†L, ρ}
//! ```
//!
//! Integrated with the Dormand–Prince 5(4) pair and adaptive steps. Only meant
//! for small cutoffs, where it serves as a brute-force reference for the
//! moment equations.

use super::{DensityMatrix, FockSystem, MonomialOp, Space};
use crate::error::{Error, Result};
use crate::linalg::{c, CMat, C64};
use crate::model::{periods_to_radians, ControlPulse, ModelParams, OMEGA};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LindbladOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest tolerated top-level Fock population of either mode.
    pub truncation_threshold: f64,
    pub max_steps: usize,
}

impl Default for LindbladOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, truncation_threshold: 1e-6, max_steps: 2_000_000 }
    }
}

/// Observables recorded at one sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct LindbladSample {
    /// Time in periods.
    pub time: f64,
    pub n_target: f64,
    pub n_aux: f64,
    pub trace: f64,
    /// `⟨a⟩`, zero for Gaussian inputs with vanishing means.
    pub mean_a: C64,
    pub top_population: f64,
}

/// Precomputed pieces of the Liouvillian for one value of `g`.
struct Generator<'a> {
    /// Diagonal of `H_eff = H − (i/2) Σ r L†L` without the coupling.
    diag: Vec<C64>,
    g: f64,
    coupling: &'a [MonomialOp; 4],
    jumps: Vec<(f64, &'a MonomialOp)>,
}

struct Jumps {
    ops: Vec<(f64, MonomialOp)>,
    /// `Σ r L†L`, diagonal for ladder operators.
    loss: Vec<f64>,
}

fn jumps(system: &FockSystem, params: &ModelParams) -> Jumps {
    let aux = params.auxiliaries()[0];
    let (gamma, n_t) = (params.gamma(), params.n_t());
    let a = system.a.clone();
    let b = system.b.clone();
    let candidates = [
        (gamma * (n_t + 1.0), a.clone()),
        (gamma * n_t, a.adjoint()),
        (aux.kappa * (aux.n_aux + 1.0), b.clone()),
        (aux.kappa * aux.n_aux, b.adjoint()),
    ];
    let ops: Vec<(f64, MonomialOp)> = candidates.into_iter().filter(|(r, _)| *r > 0.0).collect();
    let mut loss = vec![0.0; system.dim()];
    for (r, op) in &ops {
        for e in op.entries.iter().flatten() {
            loss[e.0] += r * e.1 * e.1;
        }
    }
    Jumps { ops, loss }
}

impl<'a> Generator<'a> {
    fn new(system: &'a FockSystem, jumps: &'a Jumps, g: f64) -> Self {
        let diag = (0..system.dim())
            .map(|i| {
                let (na, nb) = system.number(i);
                c(OMEGA * (na + nb) as f64, -0.5 * jumps.loss[i])
            })
            .collect();
        Self {
            diag,
            g,
            coupling: &system.coupling_terms,
            jumps: jumps.ops.iter().map(|(r, op)| (*r, op)).collect(),
        }
    }

    /// `dρ/dt` written into `out`.
    fn apply(&self, rho: &CMat, out: &mut CMat) {
        let n = rho.nrows();
        // K = H_eff ρ
        let mut k = CMat::zeros(n, n);
        for col in 0..n {
            for i in 0..n {
                let mut acc = self.diag[i] * rho[(i, col)];
                for term in self.coupling {
                    if let Some((j, w)) = term.entries[i] {
                        acc += rho[(j, col)] * (self.g * w);
                    }
                }
                k[(i, col)] = acc;
            }
        }
        // −i(K − K†) since ρ H_eff† = (H_eff ρ)† for Hermitian ρ.
        for col in 0..n {
            for i in 0..n {
                let d = k[(i, col)] - k[(col, i)].conj();
                out[(i, col)] = c(d.im, -d.re);
            }
        }
        for (r, op) in &self.jumps {
            for col in 0..n {
                let Some((sc, wc)) = op.entries[col] else { continue };
                for i in 0..n {
                    if let Some((si, wi)) = op.entries[i] {
                        out[(i, col)] += rho[(si, sc)] * (r * wi * wc);
                    }
                }
            }
        }
    }
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn lin(base: &CMat, h: f64, terms: &[(f64, &CMat)]) -> CMat {
    let mut out = base.clone();
    for (coef, k) in terms {
        out.zip_apply(*k, |o, x| *o += x * (h * coef));
    }
    out
}

struct Stepper<'a> {
    generator: Generator<'a>,
    opts: LindbladOptions,
    /// Derivative at the current point (first-same-as-last).
    k1: Option<CMat>,
}

impl<'a> Stepper<'a> {
    fn eval(&self, y: &CMat) -> CMat {
        let mut out = CMat::zeros(y.nrows(), y.ncols());
        self.generator.apply(y, &mut out);
        out
    }

    /// Attempt one step; returns the new state, its derivative and the error
    /// norm.
    fn try_step(&mut self, y: &CMat, h: f64) -> (CMat, CMat, f64) {
        let k1 = match &self.k1 {
            Some(k) => k.clone(),
            None => self.eval(y),
        };
        let k2 = self.eval(&lin(y, h, &[(A21, &k1)]));
        let k3 = self.eval(&lin(y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = self.eval(&lin(y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = self.eval(&lin(y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = self.eval(&lin(y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
        let y_new = lin(y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = self.eval(&y_new);
        let zero = CMat::zeros(y.nrows(), y.ncols());
        let err = lin(&zero, h, &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)]);
        let mut acc = 0.0;
        for ((e, a), b) in err.iter().zip(y.iter()).zip(y_new.iter()) {
            let sc = self.opts.atol + self.opts.rtol * a.norm().max(b.norm());
            acc += (e.norm() / sc).powi(2);
        }
        let norm = (acc / err.len() as f64).sqrt();
        self.k1 = Some(k1);
        (y_new, k7, norm)
    }
}

fn sample(system: &FockSystem, rho: &CMat, time: f64) -> LindbladSample {
    let dm = DensityMatrix::new_unchecked(rho.clone(), Space::Product { target: system.cutoff_target, aux: system.cutoff_aux });
    let (n_target, n_aux) = dm.occupations();
    LindbladSample {
        time,
        n_target,
        n_aux,
        trace: dm.trace().re,
        mean_a: dm.expectation(&system.a),
        top_population: dm.top_level_population(),
    }
}

/// Integrate the master equation over `pulse`.
pub fn evolve_lindblad(
    system: &FockSystem,
    params: &ModelParams,
    pulse: &ControlPulse,
    rho0: &DensityMatrix,
) -> Result<DensityMatrix> {
    evolve_lindblad_sampled(system, params, pulse, rho0, 1, LindbladOptions::default()).map(|(r, _)| r)
}

/// Integrate the master equation, recording observables at `n_samples`
/// uniformly spaced times in `(0, τ]` plus the initial time.
pub fn evolve_lindblad_sampled(
    system: &FockSystem,
    params: &ModelParams,
    pulse: &ControlPulse,
    rho0: &DensityMatrix,
    n_samples: usize,
    opts: LindbladOptions,
) -> Result<(DensityMatrix, Vec<LindbladSample>)> {
    let space = Space::Product { target: system.cutoff_target, aux: system.cutoff_aux };
    if rho0.space != space {
        return Err(Error::Space { expected: "product", found: rho0.space.name() });
    }
    if params.n_aux_modes() != 1 || pulse.n_channels() != 1 {
        return Err(Error::Unsupported("master equation supports a single auxiliary".into()));
    }
    let jumps = jumps(system, params);
    let total = pulse.total_time();
    let n_samples = n_samples.max(1);
    let sample_times: Vec<f64> = (1..=n_samples).map(|k| total * k as f64 / n_samples as f64).collect();

    let mut rho = rho0.matrix.clone();
    let mut samples = vec![sample(system, &rho, 0.0)];
    let mut next_sample = 0;
    let mut t = 0.0; // periods
    let mut h = 1e-3;
    let mut steps = 0usize;
    let mut seg_start = 0.0;
    for (s_idx, seg) in pulse.channels()[0].iter().enumerate() {
        let seg_end = if s_idx + 1 == pulse.n_segments() { total } else { seg_start + seg.duration };
        let mut stepper = Stepper { generator: Generator::new(system, &jumps, seg.g), opts, k1: None };
        while t < seg_end {
            let stop = if next_sample < n_samples { sample_times[next_sample].min(seg_end) } else { seg_end };
            let remaining = periods_to_radians(stop - t);
            let hit = h >= remaining;
            let step = if hit { remaining } else { h };
            let (y_new, k_new, err) = stepper.try_step(&rho, step);
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::Integrator(format!("exceeded {} steps", opts.max_steps)));
            }
            if !err.is_finite() {
                return Err(Error::Integrator("non-finite error estimate".into()));
            }
            if err <= 1.0 {
                rho = y_new;
                stepper.k1 = Some(k_new);
                t = if hit { stop } else { t + step / periods_to_radians(1.0) };
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !hit || factor < 1.0 {
                    h = step * factor;
                }
                if hit && next_sample < n_samples && (stop - sample_times[next_sample]).abs() <= 1e-15 * total.max(1.0) {
                    let s = sample(system, &rho, stop);
                    if s.top_population > opts.truncation_threshold {
                        return Err(Error::Truncation { population: s.top_population, threshold: opts.truncation_threshold });
                    }
                    samples.push(s);
                    next_sample += 1;
                }
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                if h < 1e-14 {
                    return Err(Error::Integrator("step size underflow".into()));
                }
            }
        }
        seg_start = seg_end;
    }
    let fin = sample(system, &rho, total);
    if fin.top_population > opts.truncation_threshold {
        return Err(Error::Truncation { population: fin.top_population, threshold: opts.truncation_threshold });
    }
    if (fin.trace - 1.0).abs() > 1e-8 {
        return Err(Error::Integrator(format!("trace drifted to {}", fin.trace)));
    }
    // Restore exact Hermiticity lost to rounding.
    let herm = (&rho + rho.adjoint()) * c(0.5, 0.0);
    Ok((DensityMatrix::new_unchecked(herm, space), samples))
}
