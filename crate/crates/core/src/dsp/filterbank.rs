use std::collections::HashMap;
use std::f64::consts::FRAC_PI_4;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fft;

/// One-octave centre frequencies from 31.5 Hz to 16 kHz.
pub const OCTAVE_CENTERS_HZ: [f64; 10] = [31.5, 63.0, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 16000.0];

/// Zero-phase, power-complementary band-split filter bank.
///
/// Adjacent bands cross over at the geometric mean of their centres with
/// sine/cosine tapers in log frequency, so the squared band responses sum to
/// one at every frequency: the lowest band extends down to dc and the highest
/// up to Nyquist. Filtering is applied in the frequency domain on a zero-padded
/// transform, which makes the operator symmetric (its own adjoint).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OctaveFilterBank {
    centers: Vec<f64>,
    sample_rate: f64,
    edges: Vec<f64>,
    /// Half-width of each crossover taper in octaves.
    taper: f64,
    #[serde(skip)]
    weight_cache: Arc<Mutex<HashMap<usize, Arc<Vec<Vec<f64>>>>>>,
}

impl PartialEq for OctaveFilterBank {
    fn eq(&self, other: &Self) -> bool {
        self.centers == other.centers && self.sample_rate == other.sample_rate
    }
}

impl OctaveFilterBank {
    pub fn new(centers: &[f64], sample_rate: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(invalid("filter bank needs at least one band"));
        }
        for &c in centers {
            if !(c > 0.0 && c < sample_rate / 2.0) {
                return Err(invalid(format!(
                    "band centre {c} Hz outside (0, {}) Hz",
                    sample_rate / 2.0
                )));
            }
        }
        if centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("band centres must be strictly increasing"));
        }
        let edges: Vec<f64> = centers.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
        let min_gap = edges
            .windows(2)
            .map(|w| (w[1] / w[0]).log2())
            .fold(f64::INFINITY, f64::min);
        let taper = (0.5 * min_gap).min(0.5);
        Ok(Self {
            centers: centers.to_vec(),
            sample_rate,
            edges,
            taper,
            weight_cache: Default::default(),
        })
    }

    /// The standard one-octave bands whose centres lie below Nyquist.
    pub fn octaves(sample_rate: f64) -> Result<Self> {
        let centers: Vec<f64> = OCTAVE_CENTERS_HZ
            .iter()
            .copied()
            .filter(|&c| c < sample_rate / 2.0)
            .collect();
        Self::new(&centers, sample_rate)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn num_bands(&self) -> usize {
        self.centers.len()
    }

    /// Amplitude response of `band` at `freq` Hz.
    pub fn band_weight(&self, band: usize, freq: f64) -> f64 {
        // position within the taper around `edge`, in [0, 1]
        let pos = |edge: f64| {
            if freq <= 0.0 {
                return 0.0;
            }
            let x = (freq / edge).log2() / self.taper;
            0.5 * (1.0 + x.clamp(-1.0, 1.0))
        };
        let rise = if band == 0 {
            1.0
        } else {
            (FRAC_PI_4 * 2.0 * pos(self.edges[band - 1])).sin()
        };
        let fall = if band + 1 == self.centers.len() {
            1.0
        } else {
            (FRAC_PI_4 * 2.0 * pos(self.edges[band])).cos()
        };
        rise * fall
    }

    /// Per-band weights on the half spectrum of a `padded`-point transform,
    /// with the inverse-transform scale folded in.
    fn weights(&self, padded: usize) -> Arc<Vec<Vec<f64>>> {
        let mut cache = self.weight_cache.lock().expect("weight cache poisoned");
        cache
            .entry(padded)
            .or_insert_with(|| {
                let scale = 1.0 / padded as f64;
                let half = padded / 2 + 1;
                Arc::new(
                    (0..self.num_bands())
                        .map(|band| {
                            (0..half)
                                .map(|k| {
                                    let f = k as f64 * self.sample_rate / padded as f64;
                                    self.band_weight(band, f) * scale
                                })
                                .collect()
                        })
                        .collect(),
                )
            })
            .clone()
    }

    fn padded_len(&self, len: usize) -> usize {
        fft::fast_len(len + (0.25 * self.sample_rate).ceil() as usize + 64)
    }

    /// Splits `x` into one signal per band, each the same length as `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let len = x.len();
        if len == 0 {
            return vec![Vec::new(); self.num_bands()];
        }
        let padded = self.padded_len(len);
        let mut buf = vec![0.0; padded];
        buf[..len].copy_from_slice(x);
        let spec = fft::rfft(&mut buf);
        let weights = self.weights(padded);
        weights
            .iter()
            .map(|w| {
                let mut s: Vec<_> = spec.iter().zip(w).map(|(v, &g)| v * g).collect();
                let mut y = fft::irfft(&mut s, padded);
                y.truncate(len);
                y
            })
            .collect()
    }

    /// Adjoint of [`apply`](Self::apply): sums the band-filtered gradients.
    pub(crate) fn apply_adjoint(&self, grads: &[Vec<f64>]) -> Vec<f64> {
        let len = grads.first().map_or(0, Vec::len);
        if len == 0 {
            return Vec::new();
        }
        let padded = self.padded_len(len);
        let half = padded / 2 + 1;
        let mut acc = vec![num_complex::Complex64::new(0.0, 0.0); half];
        let weights = self.weights(padded);
        for (g, w) in grads.iter().zip(weights.iter()) {
            let mut buf = vec![0.0; padded];
            buf[..len].copy_from_slice(g);
            let spec = fft::rfft(&mut buf);
            for ((a, v), &gw) in acc.iter_mut().zip(&spec).zip(w) {
                *a += v * gw;
            }
        }
        let mut y = fft::irfft(&mut acc, padded);
        y.truncate(len);
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn energy(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn power_complementary() {
        let bank = OctaveFilterBank::octaves(48000.0).unwrap();
        for i in 0..2000 {
            let f = 24000.0 * i as f64 / 1999.0;
            let s: f64 = (0..bank.num_bands()).map(|b| bank.band_weight(b, f).powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-12, "{f}: {s}");
        }
    }

    #[test]
    fn rejects_out_of_range_band() {
        assert!(OctaveFilterBank::new(&[100.0, 30000.0], 48000.0).is_err());
        assert!(OctaveFilterBank::new(&[0.0], 48000.0).is_err());
        assert!(OctaveFilterBank::new(&[], 48000.0).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let bank = OctaveFilterBank::octaves(48000.0).unwrap();
        let out = bank.apply(&[0.0; 5000]);
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    /// Monte Carlo over white noise: total band energy matches the input and
    /// each band's share tracks its bandwidth.
    #[test]
    fn white_noise_energy_split() {
        let fs = 48000.0;
        let bank = OctaveFilterBank::octaves(fs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..96000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let bands = bank.apply(&x);
        let e_in = energy(&x);
        let shares: Vec<f64> = bands.iter().map(|b| energy(b) / e_in).collect();
        let total: f64 = shares.iter().sum();
        assert!((0.95..=1.05).contains(&total), "total {total}");
        // Expected share: ∫ W² df / (fs/2), integrated numerically.
        for (b, share) in shares.iter().enumerate() {
            let n = 200_000;
            let expect: f64 = (0..n)
                .map(|i| bank.band_weight(b, (i as f64 + 0.5) * fs / 2.0 / n as f64).powi(2))
                .sum::<f64>()
                / n as f64;
            let tol = 0.15 * expect + 2e-4;
            assert!((share - expect).abs() < tol, "band {b}: {share} vs {expect}");
        }
    }

    #[test]
    fn sinusoid_lands_in_its_band() {
        let fs = 48000.0;
        let bank = OctaveFilterBank::octaves(fs).unwrap();
        let x: Vec<f64> = (0..48000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / fs).sin())
            .collect();
        let bands = bank.apply(&x);
        let total: f64 = bands.iter().map(|b| energy(b)).sum();
        assert!(energy(&bands[5]) / total >= 0.9);
    }

    #[test]
    fn adjoint_identity() {
        let bank = OctaveFilterBank::new(&[100.0, 400.0, 1600.0], 8000.0).unwrap();
        let x: Vec<f64> = (0..700).map(|i| ((i * 37) % 23) as f64 - 11.0).collect();
        let g: Vec<Vec<f64>> = (0..3)
            .map(|b| (0..700).map(|i| (((i + b * 5) * 17) % 13) as f64 - 6.0).collect())
            .collect();
        let y = bank.apply(&x);
        let lhs: f64 = y
            .iter()
            .zip(&g)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>())
            .sum();
        let xt = bank.apply_adjoint(&g);
        let rhs: f64 = xt.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
