//! Physical parameters, control pulses and cooling metrics.
//!
//! Everything is expressed in units of the target frequency: `ω = 1`, `ħ = 1`.
//! Rates (`γ`, `κ`, `g`) are multiples of `ω`. Durations are measured in target
//! periods; one period is `2π` in the radian time used by the propagators.
//!
//! The auxiliary resonator is assumed to be frequency-converted onto the
//! target exactly, so the auxiliary frequency and the modulation frequency of
//! the coupling never appear at runtime.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Target angular frequency. Every rate is stored relative to it.
pub const OMEGA: f64 = 1.0;

/// Length of one target period in radian time.
pub const PERIOD: f64 = 2.0 * PI / OMEGA;

/// Largest number of auxiliary resonators supported.
pub const MAX_AUXILIARIES: usize = 2;

/// Convert a duration in periods to radian time.
pub fn periods_to_radians(periods: f64) -> f64 {
    periods * PERIOD
}

/// Thermal bath attached to one auxiliary resonator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Auxiliary {
    pub kappa: f64,
    pub n_aux: f64,
}

impl Auxiliary {
    pub fn new(kappa: f64, n_aux: f64) -> Self {
        Self { kappa, n_aux }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    gamma: f64,
    n_t: f64,
    auxiliaries: Vec<Auxiliary>,
}

/// Validated physical constants of the target and its auxiliaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ModelParams {
    gamma: f64,
    n_t: f64,
    auxiliaries: Vec<Auxiliary>,
}

impl TryFrom<RawParams> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        ModelParams::new(raw.gamma, raw.n_t, raw.auxiliaries)
    }
}

impl From<ModelParams> for RawParams {
    fn from(p: ModelParams) -> Self {
        RawParams { gamma: p.gamma, n_t: p.n_t, auxiliaries: p.auxiliaries }
    }
}

fn check_rate(field: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Validation { field, reason: format!("{value} is not finite") });
    }
    if value < 0.0 {
        return Err(Error::Validation { field, reason: format!("{value} is negative") });
    }
    Ok(())
}

impl ModelParams {
    pub fn new(gamma: f64, n_t: f64, auxiliaries: Vec<Auxiliary>) -> Result<Self> {
        check_rate("gamma", gamma)?;
        check_rate("n_T", n_t)?;
        for aux in &auxiliaries {
            check_rate("kappa", aux.kappa)?;
            check_rate("n_aux", aux.n_aux)?;
        }
        if auxiliaries.is_empty() || auxiliaries.len() > MAX_AUXILIARIES {
            return Err(Error::Unsupported(format!(
                "{} auxiliaries requested, only 1 or 2 are supported",
                auxiliaries.len()
            )));
        }
        Ok(Self { gamma, n_t, auxiliaries })
    }

    /// Single-auxiliary shorthand.
    pub fn single(gamma: f64, n_t: f64, kappa: f64, n_aux: f64) -> Result<Self> {
        Self::new(gamma, n_t, vec![Auxiliary::new(kappa, n_aux)])
    }

    pub fn omega(&self) -> f64 {
        OMEGA
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_t(&self) -> f64 {
        self.n_t
    }

    pub fn auxiliaries(&self) -> &[Auxiliary] {
        &self.auxiliaries
    }

    /// Number of auxiliary resonators `M`.
    pub fn n_aux_modes(&self) -> usize {
        self.auxiliaries.len()
    }

    /// Same parameters with every auxiliary thermal occupation replaced.
    pub fn with_n_aux(&self, n_aux: f64) -> Result<Self> {
        let aux = self.auxiliaries.iter().map(|a| Auxiliary::new(a.kappa, n_aux)).collect();
        Self::new(self.gamma, self.n_t, aux)
    }

    /// Same parameters with the first auxiliary damping replaced.
    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        let mut aux = self.auxiliaries.clone();
        aux[0].kappa = kappa;
        Self::new(self.gamma, self.n_t, aux)
    }
}

/// Validated constructor taking `(kappa, n_aux)` tuples.
pub fn make_params(gamma: f64, n_t: f64, aux_list: &[(f64, f64)]) -> Result<ModelParams> {
    ModelParams::new(gamma, n_t, aux_list.iter().map(|&(k, n)| Auxiliary::new(k, n)).collect())
}

/// One constant piece of `g(t)`: a coupling rate (units of `ω`) held for
/// `duration` periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub g: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPulse {
    channels: Vec<Vec<Segment>>,
}

/// Piecewise-constant coupling, one segment list per auxiliary channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPulse", into = "RawPulse")]
pub struct ControlPulse {
    channels: Vec<Vec<Segment>>,
    total: f64,
}

impl TryFrom<RawPulse> for ControlPulse {
    type Error = Error;

    fn try_from(raw: RawPulse) -> Result<Self> {
        ControlPulse::new(raw.channels)
    }
}

impl From<ControlPulse> for RawPulse {
    fn from(p: ControlPulse) -> Self {
        RawPulse { channels: p.channels }
    }
}

fn channel_time(segments: &[Segment]) -> f64 {
    segments.iter().map(|s| s.duration).sum()
}

impl ControlPulse {
    pub fn new(channels: Vec<Vec<Segment>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Validation { field: "channels", reason: "no channels".into() });
        }
        for segments in &channels {
            if segments.is_empty() {
                return Err(Error::Validation { field: "segments", reason: "empty channel".into() });
            }
            for s in segments {
                if !(s.duration > 0.0 && s.duration.is_finite()) {
                    return Err(Error::Validation {
                        field: "duration",
                        reason: format!("{} is not a positive duration", s.duration),
                    });
                }
                if !s.g.is_finite() {
                    return Err(Error::Validation { field: "g", reason: format!("{} is not finite", s.g) });
                }
            }
        }
        let t0 = channel_time(&channels[0]);
        for segments in &channels[1..] {
            let t = channel_time(segments);
            if (t - t0).abs() > 1e-12 * t0.max(1.0) {
                return Err(Error::Validation {
                    field: "total_time",
                    reason: format!("channels disagree on total time ({t0} vs {t})"),
                });
            }
        }
        Ok(Self { channels, total: t0 })
    }

    /// Pins the reported total time to `total`, which must agree with the
    /// segment sum up to rounding.
    fn with_exact_total(mut self, total: f64) -> Self {
        debug_assert!((self.total - total).abs() <= 1e-12 * total.max(1.0));
        self.total = total;
        self
    }

    /// Equal-duration segments; `values[c]` lists the g values for channel `c`.
    pub fn uniform(values: &[Vec<f64>], total_time: f64) -> Result<Self> {
        let channels = values
            .iter()
            .map(|vals| {
                let dt = total_time / vals.len().max(1) as f64;
                vals.iter().map(|&g| Segment { g, duration: dt }).collect()
            })
            .collect();
        Ok(Self::new(channels)?.with_exact_total(total_time))
    }

    /// Single-channel equal-duration pulse.
    pub fn single(values: &[f64], total_time: f64) -> Result<Self> {
        Self::uniform(&[values.to_vec()], total_time)
    }

    /// Constant coupling on every channel.
    pub fn constant(g: &[f64], n_segments: usize, total_time: f64) -> Result<Self> {
        let values: Vec<Vec<f64>> = g.iter().map(|&gi| vec![gi; n_segments]).collect();
        Self::uniform(&values, total_time)
    }

    pub fn channels(&self) -> &[Vec<Segment>] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Segment count of the first channel.
    pub fn n_segments(&self) -> usize {
        self.channels[0].len()
    }

    /// Total duration in periods.
    pub fn total_time(&self) -> f64 {
        self.total
    }

    /// All g values, channel-major.
    pub fn values(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.iter().map(|s| s.g)).collect()
    }

    /// Coupling on `channel` at time `t` (periods). Segments are closed on the
    /// left; `t` at or past the end returns the last value.
    pub fn value_at(&self, channel: usize, t: f64) -> f64 {
        let segments = &self.channels[channel];
        let mut start = 0.0;
        for s in segments {
            if t < start + s.duration {
                return s.g;
            }
            start += s.duration;
        }
        segments[segments.len() - 1].g
    }

    /// Merge all channels into a common time grid: every boundary of any
    /// channel becomes a boundary. Returns `(duration, g per channel)` pieces.
    pub fn aligned_pieces(&self) -> Vec<(f64, Vec<f64>)> {
        if self.channels.len() == 1 {
            return self.channels[0].iter().map(|s| (s.duration, vec![s.g])).collect();
        }
        let total = self.total_time();
        let mut edges: Vec<f64> = Vec::new();
        for segments in &self.channels {
            let mut t = 0.0;
            for s in segments {
                t += s.duration;
                edges.push(t.min(total));
            }
        }
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * total.max(1.0));
        let mut pieces = Vec::with_capacity(edges.len());
        let mut start = 0.0;
        for &end in &edges {
            let dt = end - start;
            if dt <= 0.0 {
                continue;
            }
            let mid = 0.5 * (start + end);
            let g = (0..self.channels.len()).map(|c| self.value_at(c, mid)).collect();
            pieces.push((dt, g));
            start = end;
        }
        pieces
    }
}

/// Refine a pulse to `n_segments` equal-duration segments per channel.
///
/// Each new segment takes the value of the old step function at its midpoint.
/// When the old segmentation divides the new one evenly this reproduces the old
/// step function exactly.
pub fn pulse_resample(pulse: &ControlPulse, n_segments: usize) -> Result<ControlPulse> {
    let existing = pulse.channels.iter().map(Vec::len).max().unwrap_or(0);
    if n_segments < existing {
        return Err(Error::RefinementOnly { requested: n_segments, existing });
    }
    let total = pulse.total_time();
    let dt = total / n_segments as f64;
    let channels = (0..pulse.n_channels())
        .map(|c| {
            (0..n_segments)
                .map(|k| Segment { g: pulse.value_at(c, (k as f64 + 0.5) * dt), duration: dt })
                .collect()
        })
        .collect();
    Ok(ControlPulse::new(channels)?.with_exact_total(total))
}

/// Cooling figures of merit derived from an achieved occupation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoolingMetrics {
    /// Achieved `⟨a†a⟩`.
    pub n_cool: f64,
    /// `n_T / n_cool`.
    pub f_cool: f64,
    /// Effective extraction rate `γ n_T / n_cool`, units of `ω`. This is a
    /// derived quantity, not a microscopic rate.
    pub gamma_eff: f64,
}

pub fn metrics_from_occupation(n_cool: f64, params: &ModelParams) -> Result<CoolingMetrics> {
    if !(n_cool > 0.0) || !n_cool.is_finite() {
        return Err(Error::Domain(format!("n_cool = {n_cool} must be positive and finite")));
    }
    if !(params.n_t > 0.0) {
        return Err(Error::Domain("n_T must be positive for a cooling factor".into()));
    }
    let f_cool = params.n_t / n_cool;
    Ok(CoolingMetrics { n_cool, f_cool, gamma_eff: params.gamma * f_cool })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn fig2_parameters_are_valid() {
        let p = make_params(1e-6, 100.0, &[(1.35e-3, 0.0)]).unwrap();
        assert_eq!(p.n_aux_modes(), 1);
        assert_eq!(p.omega(), 1.0);
        assert_eq!(p.auxiliaries()[0].kappa, 1.35e-3);
    }

    #[test]
    fn closed_system_is_valid() {
        assert!(make_params(0.0, 0.0, &[(0.0, 0.0)]).is_ok());
    }

    #[test]
    fn rejects_bad_inputs() {
        match make_params(-1.0, 100.0, &[(0.1, 0.0)]) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "gamma"),
            other => panic!("unexpected {other:?}"),
        }
        match make_params(0.1, f64::NAN, &[(0.1, 0.0)]) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "n_T"),
            other => panic!("unexpected {other:?}"),
        }
        match make_params(0.1, 1.0, &[(0.1, -1e-9)]) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "n_aux"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(make_params(0.1, 1.0, &[]), Err(Error::Unsupported(_))));
        assert!(matches!(
            make_params(0.1, 1.0, &[(0.1, 0.0), (0.1, 0.0), (0.1, 0.0)]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn params_json_rejects_invalid() {
        let bad = r#"{"gamma": -1.0, "n_t": 1.0, "auxiliaries": [{"kappa": 0.1, "n_aux": 0.0}]}"#;
        assert!(serde_json::from_str::<ModelParams>(bad).is_err());
        let unknown = r#"{"gamma": 1.0, "n_t": 1.0, "auxiliaries": [], "x": 1}"#;
        assert!(serde_json::from_str::<ModelParams>(unknown).is_err());
    }

    #[test]
    fn metrics_examples() {
        let p = ModelParams::single(1e-3, 100.0, 0.1, 0.0).unwrap();
        let m = metrics_from_occupation(100.0, &p).unwrap();
        assert_eq!(m.f_cool, 1.0);
        let m = metrics_from_occupation(50.0, &p).unwrap();
        assert_relative_eq!(m.gamma_eff, 2e-3, max_relative = 1e-12);
        let m = metrics_from_occupation(2.9e-4, &p).unwrap();
        assert_relative_eq!(m.f_cool, 3.448_275_862_068_965_5e5, max_relative = 1e-12);
        assert!(matches!(metrics_from_occupation(0.0, &p), Err(Error::Domain(_))));
        assert!(matches!(metrics_from_occupation(-1.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn resample_duplicates_on_exact_division() {
        let p = ControlPulse::single(&[1.78, 1.45, 2.44, 1.61, 0.195], 1.0).unwrap();
        let r = pulse_resample(&p, 10).unwrap();
        let v = r.values();
        for k in 0..5 {
            assert_eq!(v[2 * k], p.values()[k]);
            assert_eq!(v[2 * k + 1], p.values()[k]);
        }
        let c = ControlPulse::single(&[2.0], 1.0).unwrap();
        assert_eq!(pulse_resample(&c, 4).unwrap().values(), vec![2.0; 4]);
    }

    #[test]
    fn resample_seven_preserves_midpoints() {
        let p = ControlPulse::single(&[1.78, 1.45, 2.44, 1.61, 0.195], 1.0).unwrap();
        let r = pulse_resample(&p, 7).unwrap();
        assert_eq!(r.n_segments(), 7);
        // Fine-grid comparison: the two step functions agree at every new midpoint
        // and differ only inside new segments that straddle an old boundary.
        let n_fine = 7 * 5 * 40;
        let mut mismatched = 0;
        for i in 0..n_fine {
            let t = (i as f64 + 0.5) / n_fine as f64;
            if r.value_at(0, t) != p.value_at(0, t) {
                mismatched += 1;
            }
        }
        for k in 0..7 {
            let mid = (k as f64 + 0.5) / 7.0;
            assert_eq!(r.value_at(0, mid), p.value_at(0, mid));
        }
        // Each of the 4 interior old boundaries can corrupt at most half a new segment.
        assert!(mismatched as f64 <= 4.0 * 0.5 * n_fine as f64 / 7.0 + 1.0);
    }

    #[test]
    fn resample_rejects_coarsening() {
        let p = ControlPulse::single(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert!(matches!(pulse_resample(&p, 2), Err(Error::RefinementOnly { .. })));
    }

    #[test]
    fn pulse_validation() {
        assert!(ControlPulse::new(vec![vec![Segment { g: 1.0, duration: 0.0 }]]).is_err());
        assert!(ControlPulse::new(vec![vec![]]).is_err());
        let a = vec![Segment { g: 1.0, duration: 1.0 }];
        let b = vec![Segment { g: 1.0, duration: 0.5 }];
        assert!(ControlPulse::new(vec![a, b]).is_err());
    }

    #[test]
    fn aligned_pieces_merge_boundaries() {
        let p = ControlPulse::uniform(&[vec![1.0, 2.0], vec![3.0, 4.0, 5.0]], 1.0).unwrap();
        let pieces = p.aligned_pieces();
        assert_eq!(pieces.len(), 4);
        let total: f64 = pieces.iter().map(|(d, _)| d).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-14);
        assert_eq!(pieces[1].1, vec![1.0, 4.0]);
        assert_eq!(pieces[2].1, vec![2.0, 4.0]);
    }

    proptest! {
        #[test]
        fn metrics_round_trip(n_cool in 1e-8f64..1e3, n_t in 1e-3f64..1e4, gamma in 0.0f64..1.0) {
            let p = ModelParams::single(gamma, n_t, 0.1, 0.0).unwrap();
            let m = metrics_from_occupation(n_cool, &p).unwrap();
            prop_assert!((n_t / m.f_cool - n_cool).abs() <= 1e-12 * n_cool);
            prop_assert!((m.f_cool * m.n_cool - n_t).abs() <= 1e-12 * n_t);
            prop_assert!((m.gamma_eff - gamma * m.f_cool).abs() <= 1e-12 * m.gamma_eff.max(1e-300));
        }

        #[test]
        fn resample_keeps_total_time(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..12),
            extra in 0usize..40,
            total in 0.1f64..10.0,
        ) {
            let p = ControlPulse::single(&vals, total).unwrap();
            let r = pulse_resample(&p, vals.len() + extra).unwrap();
            prop_assert!((r.total_time() - p.total_time()).abs() <= 1e-15 * total);
            prop_assert_eq!(r.n_segments(), vals.len() + extra);
        }

        #[test]
        fn params_json_round_trip(gamma in 0.0f64..1.0, n_t in 0.0f64..1e3, kappa in 0.0f64..1.0) {
            let p = ModelParams::single(gamma, n_t, kappa, 1e-4).unwrap();
            let s = serde_json::to_string(&p).unwrap();
            let q: ModelParams = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(p, q);
        }
    }
}
