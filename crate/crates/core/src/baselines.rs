//! Constant-coupling references: the best steady state over `g` for each
//! auxiliary damping rate, and a single RWA swap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{mean_occupation, propagate_pulse_final, steady_state, thermal_covariance};
use crate::error::{Error, Result};
use crate::model::{ControlPulse, ModelParams};

/// Relative precision of the refined coupling.
pub const G_RELATIVE_TOLERANCE: f64 = 1e-3;

/// Log-spaced coupling grid for the coarse scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GGrid {
    pub n_points: usize,
    pub g_min: f64,
    pub g_max: f64,
}

impl Default for GGrid {
    fn default() -> Self {
        Self { n_points: 200, g_min: 1e-4, g_max: 1.0 }
    }
}

impl GGrid {
    pub fn points(&self) -> Vec<f64> {
        let (a, b) = (self.g_min.ln(), self.g_max.ln());
        let n = self.n_points;
        (0..n)
            .map(|i| if n == 1 { self.g_min } else { (a + (b - a) * i as f64 / (n - 1) as f64).exp() })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_points == 0 || !(self.g_min > 0.0) || !(self.g_max >= self.g_min) || !self.g_max.is_finite() {
            return Err(Error::Validation {
                field: "g_grid".into(),
                reason: format!("need n_points ≥ 1 and 0 < g_min ≤ g_max, got {self:?}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SidebandPoint {
    pub kappa: f64,
    pub g_opt: f64,
    pub n_ss: f64,
}

/// Steady-state `⟨a†a⟩` at constant coupling `g`.
pub fn steady_occupation(params: &ModelParams, g: f64) -> Result<f64> {
    mean_occupation(&steady_state(params, &[g])?)
}

/// Best constant coupling for the auxiliary rate already in `params`.
pub fn sideband_point(params: &ModelParams, grid: &GGrid) -> Result<SidebandPoint> {
    grid.validate()?;
    if params.n_aux_modes() != 1 {
        return Err(Error::Unsupported("the sideband reference uses one auxiliary".into()));
    }
    let kappa = params.auxiliaries()[0].kappa;
    let gs = grid.points();
    let values: Vec<f64> =
        gs.iter().map(|&g| steady_occupation(params, g).unwrap_or(f64::INFINITY)).collect();
    let (imin, &vmin) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("grid is nonempty");
    if !vmin.is_finite() {
        return Err(Error::Domain(format!(
            "no stable coupling in [{}, {}] for kappa = {kappa}",
            grid.g_min, grid.g_max
        )));
    }
    if gs.len() < 3 {
        return Ok(SidebandPoint { kappa, g_opt: gs[imin], n_ss: vmin });
    }
    let lo = gs[imin.saturating_sub(1)].ln();
    let hi = gs[(imin + 1).min(gs.len() - 1)].ln();
    let f = |lg: f64| steady_occupation(params, lg.exp()).unwrap_or(f64::INFINITY);
    let (lg, v) = golden_section(f, lo, hi, G_RELATIVE_TOLERANCE);
    if v <= vmin {
        Ok(SidebandPoint { kappa, g_opt: lg.exp(), n_ss: v })
    } else {
        Ok(SidebandPoint { kappa, g_opt: gs[imin], n_ss: vmin })
    }
}

/// Sideband points for each `kappa`, computed in parallel; each entry fails
/// on its own.
pub fn sideband_curve(params: &ModelParams, kappas: &[f64], grid: &GGrid) -> Result<Vec<Result<SidebandPoint>>> {
    if kappas.is_empty() {
        return Err(Error::Validation { field: "kappa_grid".into(), reason: "must not be empty".into() });
    }
    grid.validate()?;
    Ok(kappas
        .par_iter()
        .map(|&k| sideband_point(&params.with_kappa(k)?, grid))
        .collect())
}

/// Minimize a unimodal `f` on `[a, b]` until the bracket is below `tol`.
fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Final `⟨a†a⟩` after one constant-coupling swap lasting `π/(2g)`.
pub fn rwa_swap_cool(params: &ModelParams, g: f64) -> Result<f64> {
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::Validation { field: "g".into(), reason: "must be positive".into() });
    }
    if params.n_aux_modes() != 1 {
        return Err(Error::Unsupported("the swap reference uses one auxiliary".into()));
    }
    // π/(2g) radians in periods.
    let periods = 1.0 / (4.0 * g);
    let pulse = ControlPulse::single(&[g], periods)?;
    let s = propagate_pulse_final(params, &pulse, &thermal_covariance(params))?;
    mean_occupation(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(gamma_nt: f64) -> ModelParams {
        ModelParams::single(gamma_nt / 100.0, 100.0, 0.1, 0.0).unwrap()
    }

    fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        GGrid { n_points: n, g_min: lo, g_max: hi }.points()
    }

    #[test]
    fn grid_end_points() {
        let g = GGrid::default().points();
        assert_eq!(g.len(), 200);
        assert!((g[0] - 1e-4).abs() < 1e-16);
        assert!((g[199] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, v) = golden_section(|x| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 1e-8);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimum_kappa_in_expected_range() {
        let kappas = log_grid(1e-4, 1.0, 17);
        let pts = sideband_curve(&panel(1e-2), &kappas, &GGrid::default()).unwrap();
        let pts: Vec<SidebandPoint> = pts.into_iter().map(|p| p.unwrap()).collect();
        let best = pts.iter().min_by(|a, b| a.n_ss.total_cmp(&b.n_ss)).unwrap();
        assert!((0.1..=1.0).contains(&best.kappa), "best kappa {}", best.kappa);
        // Below the optimum the curve falls as κ grows.
        for w in pts.windows(2).filter(|w| w[1].kappa <= best.kappa) {
            assert!(w[1].n_ss < w[0].n_ss);
        }
    }

    #[test]
    fn weak_coupling_leaves_thermal_value() {
        let p = panel(1e-2);
        let n = steady_occupation(&p, 1e-7).unwrap();
        assert!((n - 100.0).abs() < 1e-3 * 100.0);
    }

    #[test]
    fn refined_point_beats_every_grid_value() {
        let p = panel(1e-3).with_kappa(0.03).unwrap();
        let grid = GGrid::default();
        let pt = sideband_point(&p, &grid).unwrap();
        for g in grid.points() {
            if let Ok(v) = steady_occupation(&p, g) {
                assert!(pt.n_ss <= v);
            }
        }
    }

    #[test]
    fn grid_density_barely_matters() {
        let p = panel(1e-4).with_kappa(0.01).unwrap();
        let a = sideband_point(&p, &GGrid::default()).unwrap();
        let b = sideband_point(&p, &GGrid { n_points: 400, ..GGrid::default() }).unwrap();
        assert!((a.n_ss - b.n_ss).abs() <= 5e-3 * a.n_ss);
    }

    #[test]
    fn unstable_only_grid_is_an_error() {
        let p = panel(1e-4).with_kappa(1e-3).unwrap();
        let grid = GGrid { n_points: 5, g_min: 0.6, g_max: 0.9 };
        assert!(matches!(sideband_point(&p, &grid), Err(Error::Domain(_))));
        assert!(sideband_curve(&p, &[], &grid).is_err());
    }

    #[test]
    fn weak_swap_transfers_almost_everything() {
        let p = ModelParams::single(0.0, 0.5, 0.0, 0.0).unwrap();
        let n = rwa_swap_cool(&p, 0.01).unwrap();
        assert!(n <= 1e-3 * 0.5, "{n}");
    }

    #[test]
    fn strong_swap_is_worse() {
        let p = ModelParams::single(0.0, 0.5, 0.0, 0.0).unwrap();
        assert!(rwa_swap_cool(&p, 0.3).unwrap() > rwa_swap_cool(&p, 0.01).unwrap());
    }

    #[test]
    fn heating_raises_swap_residual() {
        let mut last = 0.0;
        for gamma in [1e-6, 1e-5, 1e-4] {
            let p = ModelParams::single(gamma, 100.0, 0.0, 0.0).unwrap();
            let n = rwa_swap_cool(&p, 0.01).unwrap();
            assert!(n > last);
            last = n;
        }
    }
}
