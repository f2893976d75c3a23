//! Signal analysis: STFT, octave filter bank, Schroeder integration, noise
//! injection, energy matching and mixing-time truncation.

mod edc;
mod filterbank;
mod noise;
mod stft;

pub(crate) use edc::to_db;
pub(crate) use edc::EDC_FLOOR_LINEAR;
pub use edc::{schroeder_edc, EdcScale, EnergyDecayCurve, EDC_FLOOR_DB};
pub use filterbank::{OctaveFilterBank, OCTAVE_CENTERS_HZ};
pub use noise::{add_noise_at_snr, noise_energy_for_snr, noise_with_energy};
pub(crate) use stft::{check_params as check_stft_params, frame_count, stft_backward, stft_complex};
pub use stft::{hann, stft_magnitude, Spectrogram};

use crate::attenuation::AttenuationParams;
use crate::error::{invalid, Result};
use crate::fdn::{render_ir, FdnParams, FrequencyGrid, ImpulseResponse};

/// Band-split decay curves of `h`.
pub fn band_edcs(h: &[f64], bank: &OctaveFilterBank, scale: EdcScale) -> EnergyDecayCurve {
    EnergyDecayCurve {
        bands_hz: bank.centers().to_vec(),
        scale,
        values: bank.apply(h).iter().map(|b| schroeder_edc(b, scale)).collect(),
    }
}

/// Rescales `b` and `c` by the same factor so that the model's impulse
/// response at `atten` has `reference_energy`.
pub fn match_energy(
    model: &FdnParams,
    atten: &AttenuationParams,
    reference_energy: f64,
    grid: &FrequencyGrid,
) -> Result<FdnParams> {
    if !(reference_energy > 0.0) {
        return Err(invalid("reference energy must be positive"));
    }
    let e = render_ir(model, atten, grid)?.energy();
    if !(e > 0.0) {
        return Err(invalid("model impulse response has zero energy"));
    }
    let g = (reference_energy / e).powf(0.25);
    let b = model.input_gains().iter().map(|v| v * g).collect();
    let c = model.output_gains().iter().map(|v| v * g).collect();
    model.with_gains(b, c)
}

/// Number of samples dropped for a mixing time of `t_mix` seconds.
pub fn mixing_time_samples(t_mix: f64, sample_rate: f64) -> usize {
    (t_mix * sample_rate).round() as usize
}

/// Drops the first `round(t_mix · fs)` samples.
pub fn truncate_to_mixing_time(h: &ImpulseResponse, t_mix: f64) -> Result<ImpulseResponse> {
    if !(t_mix >= 0.0) || t_mix >= h.duration() {
        return Err(invalid(format!(
            "mixing time {t_mix} s outside [0, {}) s",
            h.duration()
        )));
    }
    let skip = mixing_time_samples(t_mix, h.sample_rate);
    ImpulseResponse::new(h.samples[skip..].to_vec(), h.sample_rate)
}
