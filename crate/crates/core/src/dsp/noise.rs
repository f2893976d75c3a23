use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::fdn::{energy, ImpulseResponse};

/// Seeded white Gaussian noise rescaled to exactly `target_energy`.
pub fn noise_with_energy(len: usize, target_energy: f64, seed: u64) -> Result<Vec<f64>> {
    if !(target_energy >= 0.0) {
        return Err(invalid("noise energy must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let e = energy(&w);
    if !(e > 0.0) {
        return Err(invalid("noise realisation has zero energy"));
    }
    let g = (target_energy / e).sqrt();
    for v in &mut w {
        *v *= g;
    }
    Ok(w)
}

/// Noise energy that puts a signal of energy `signal_energy` at `snr_db`.
pub fn noise_energy_for_snr(signal_energy: f64, snr_db: f64) -> f64 {
    signal_energy / 10f64.powf(snr_db / 10.0)
}

/// Adds seeded white Gaussian noise scaled so that the realised SNR is
/// exactly `snr_db`.
pub fn add_noise_at_snr(h: &ImpulseResponse, snr_db: f64, seed: u64) -> Result<ImpulseResponse> {
    let e = h.energy();
    if !(e > 0.0) {
        return Err(invalid("cannot set an SNR relative to a zero-energy signal"));
    }
    let w = noise_with_energy(h.len(), noise_energy_for_snr(e, snr_db), seed)?;
    let samples = h.samples.iter().zip(&w).map(|(a, b)| a + b).collect();
    ImpulseResponse::new(samples, h.sample_rate)
}
