//! Proportional first-order shelving attenuation filters.
//!
//! Each delay line gets its own low shelf whose dc and Nyquist gains realise
//! the target decay times for that line's length, so the per-line T60 curves
//! coincide up to the small non-proportionality of a first-order section.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fdn::FrequencyGrid;

/// Upper crossover limit as a fraction of the sample rate; keeps `tan(2π f_c/fs)`
/// on its positive, monotone branch.
pub const MAX_CROSSOVER_RATIO: f64 = 0.245;

/// Default Nyquist decay time in seconds.
pub const DEFAULT_T60_NYQUIST: f64 = 0.5;

/// The two tunable filter variables plus the fixed Nyquist decay time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttenuationParams {
    /// Decay time at dc in seconds.
    pub t60_dc: f64,
    /// Shelf crossover in Hz.
    pub crossover_hz: f64,
    /// Decay time at Nyquist in seconds.
    pub t60_nyquist: f64,
}

impl AttenuationParams {
    pub fn new(t60_dc: f64, crossover_hz: f64, t60_nyquist: f64) -> Self {
        Self {
            t60_dc,
            crossover_hz,
            t60_nyquist,
        }
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if !(self.t60_dc > 0.0) || !(self.t60_nyquist > 0.0) {
            return Err(invalid("decay times must be positive"));
        }
        if !(self.crossover_hz > 0.0 && self.crossover_hz < sample_rate / 2.0) {
            return Err(invalid(format!(
                "crossover {} Hz outside (0, {}) Hz",
                self.crossover_hz,
                sample_rate / 2.0
            )));
        }
        Ok(())
    }
}

/// Coefficients of `(b0 + b1 z⁻¹) / (a0 + a1 z⁻¹)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShelvingCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub a0: f64,
    pub a1: f64,
}

impl ShelvingCoeffs {
    pub fn pole(&self) -> f64 {
        -self.a1 / self.a0
    }

    pub fn is_stable(&self) -> bool {
        self.pole().abs() < 1.0
    }
}

/// Per-sample attenuation in dB, `−60 / (fs · t60)`.
pub fn per_sample_gain_db(t60: f64, sample_rate: f64) -> Result<f64> {
    if !(t60 > 0.0) {
        return Err(invalid("t60 must be positive"));
    }
    Ok(-60.0 / (sample_rate * t60))
}

/// Linear gain of a line of `delay` samples for decay time `t60`.
pub fn line_gain(t60: f64, delay: usize, sample_rate: f64) -> Result<f64> {
    let db = per_sample_gain_db(t60, sample_rate)?;
    Ok(10f64.powf(delay as f64 * db / 20.0))
}

pub(crate) fn effective_crossover(crossover_hz: f64, sample_rate: f64) -> f64 {
    crossover_hz.min(MAX_CROSSOVER_RATIO * sample_rate)
}

/// Designs the shelf for one delay line of length `delay`.
pub fn design_shelving(atten: &AttenuationParams, delay: usize, sample_rate: f64) -> Result<ShelvingCoeffs> {
    atten.validate(sample_rate)?;
    if delay == 0 {
        return Err(invalid("delay must be positive"));
    }
    let gamma_dc = line_gain(atten.t60_dc, delay, sample_rate)?;
    let gamma_ny = line_gain(atten.t60_nyquist, delay, sample_rate)?;
    let fc = effective_crossover(atten.crossover_hz, sample_rate);
    let t = (2.0 * PI * fc / sample_rate).tan();
    if !t.is_finite() || t <= 0.0 {
        return Err(invalid("crossover produces a non-finite warp"));
    }
    Ok(shelf_from_gains(gamma_dc, gamma_ny, t))
}

fn shelf_from_gains(gamma_dc: f64, gamma_ny: f64, t: f64) -> ShelvingCoeffs {
    let s = (gamma_dc / gamma_ny).sqrt();
    ShelvingCoeffs {
        b0: gamma_ny * (s * t + 1.0),
        b1: gamma_ny * (s * t - 1.0),
        a0: t / s + 1.0,
        a1: t / s - 1.0,
    }
}

/// Sensitivities of the four coefficients to `t60_dc` and `f_c`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ShelvingJacobian {
    pub(crate) d_t60: [f64; 4],
    pub(crate) d_fc: [f64; 4],
}

pub(crate) fn design_shelving_jacobian(
    atten: &AttenuationParams,
    delay: usize,
    sample_rate: f64,
) -> Result<(ShelvingCoeffs, ShelvingJacobian)> {
    let coeffs = design_shelving(atten, delay, sample_rate)?;
    let gamma_dc = line_gain(atten.t60_dc, delay, sample_rate)?;
    let gamma_ny = line_gain(atten.t60_nyquist, delay, sample_rate)?;
    let s = (gamma_dc / gamma_ny).sqrt();
    let fc = effective_crossover(atten.crossover_hz, sample_rate);
    let omega = 2.0 * PI * fc / sample_rate;
    let t = omega.tan();

    // γ_dc = 10^(−3 m / (fs T)), so dγ/dT = γ · 3 m ln10 / (fs T²)
    let dgamma_dt =
        gamma_dc * 3.0 * delay as f64 * std::f64::consts::LN_10 / (sample_rate * atten.t60_dc * atten.t60_dc);
    let ds_dt = dgamma_dt / (2.0 * s * gamma_ny);
    let d_s = [gamma_ny * t, gamma_ny * t, -t / (s * s), -t / (s * s)];
    let d_tan = [gamma_ny * s, gamma_ny * s, 1.0 / s, 1.0 / s];
    let dtan_dfc = if atten.crossover_hz < MAX_CROSSOVER_RATIO * sample_rate {
        (1.0 + t * t) * 2.0 * PI / sample_rate
    } else {
        0.0
    };
    let jac = ShelvingJacobian {
        d_t60: d_s.map(|v| v * ds_dt),
        d_fc: d_tan.map(|v| v * dtan_dfc),
    };
    Ok((coeffs, jac))
}

/// Frequency response `(b0 + b1 z⁻¹)/(a0 + a1 z⁻¹)` on the grid.
pub fn eval_filter(coeffs: &ShelvingCoeffs, grid: &FrequencyGrid) -> Vec<Complex64> {
    grid.points()
        .iter()
        .map(|z| {
            let zi = z.conj();
            (coeffs.b0 + coeffs.b1 * zi) / (coeffs.a0 + coeffs.a1 * zi)
        })
        .collect()
}

/// Per-line responses `[line][bin]` for a set of delay lengths.
pub fn line_responses(
    atten: &AttenuationParams,
    delays: &[usize],
    sample_rate: f64,
    grid: &FrequencyGrid,
) -> Result<Vec<Vec<Complex64>>> {
    delays
        .iter()
        .map(|&m| Ok(eval_filter(&design_shelving(atten, m, sample_rate)?, grid)))
        .collect()
}

/// Maps a line's magnitude response back to the decay time it realises.
pub fn gain_to_t60_curve(magnitude: &[f64], delay: usize, sample_rate: f64) -> Result<Vec<f64>> {
    magnitude
        .iter()
        .map(|&g| {
            if !(g > 0.0 && g < 1.0) {
                return Err(invalid(format!("magnitude {g} outside (0, 1)")));
            }
            Ok(-60.0 * delay as f64 / (sample_rate * 20.0 * g.log10()))
        })
        .collect()
}

/// Magnitude and T60 curves of every line, for plotting filter designs.
#[derive(Debug, Clone, Serialize)]
pub struct DesignCurves {
    pub frequencies_hz: Vec<f64>,
    /// `[line][bin]` magnitude in dB.
    pub magnitude_db: Vec<Vec<f64>>,
    /// `[line][bin]` decay time in seconds.
    pub t60: Vec<Vec<f64>>,
}

impl DesignCurves {
    /// Largest pointwise `(max − min) / mean` across lines.
    pub fn max_relative_spread(&self) -> f64 {
        let bins = self.frequencies_hz.len();
        (0..bins)
            .map(|k| {
                let vals = self.t60.iter().map(|c| c[k]);
                let (lo, hi, sum) = vals.fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), v| {
                    (lo.min(v), hi.max(v), s + v)
                });
                (hi - lo) / (sum / self.t60.len() as f64)
            })
            .fold(0.0, f64::max)
    }
}

pub fn design_curves(
    atten: &AttenuationParams,
    delays: &[usize],
    sample_rate: f64,
    grid: &FrequencyGrid,
) -> Result<DesignCurves> {
    let responses = line_responses(atten, delays, sample_rate, grid)?;
    let mut magnitude_db = Vec::with_capacity(delays.len());
    let mut t60 = Vec::with_capacity(delays.len());
    for (resp, &m) in responses.iter().zip(delays) {
        let mag: Vec<f64> = resp.iter().map(|v| v.norm()).collect();
        magnitude_db.push(mag.iter().map(|g| 20.0 * g.log10()).collect());
        t60.push(gain_to_t60_curve(&mag, m, sample_rate)?);
    }
    Ok(DesignCurves {
        frequencies_hz: grid.frequencies_hz(sample_rate),
        magnitude_db,
        t60,
    })
}
