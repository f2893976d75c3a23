use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::fft;

/// Magnitude STFT, frame-major `magnitudes[frame * bins + bin]`.
#[derive(Debug, Clone, Serialize)]
pub struct Spectrogram {
    pub magnitudes: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub window_size: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.magnitudes[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.magnitudes[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / size as f64).cos())
        .collect()
}

pub(crate) fn check_params(len: usize, window_size: usize, hop: usize) -> Result<()> {
    if window_size < 8 {
        return Err(invalid("window size must be at least 8"));
    }
    if hop == 0 || hop > window_size {
        return Err(invalid("hop must be in (0, window_size]"));
    }
    if len < window_size {
        return Err(invalid(format!(
            "signal of {len} samples is shorter than one window ({window_size})"
        )));
    }
    Ok(())
}

/// Number of centred frames for a signal of `len` samples.
pub(crate) fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Complex STFT with centred, zero-padded Hann frames. Frame `f` covers
/// samples `[f·hop − w/2, f·hop + w/2)`.
pub(crate) fn stft_complex(x: &[f64], window_size: usize, hop: usize) -> (Vec<Complex64>, usize, usize) {
    let win = hann(window_size);
    let frames = frame_count(x.len(), hop);
    let bins = window_size / 2 + 1;
    let plan = fft::forward_plan(window_size);
    let mut buf = vec![0.0; window_size];
    let mut out_frame = plan.make_output_vec();
    let mut out = Vec::with_capacity(frames * bins);
    let half = (window_size / 2) as isize;
    for f in 0..frames {
        let start = (f * hop) as isize - half;
        for (n, b) in buf.iter_mut().enumerate() {
            let idx = start + n as isize;
            *b = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize] * win[n]
            } else {
                0.0
            };
        }
        plan.process(&mut buf, &mut out_frame)
            .expect("buffer sizes come from the plan");
        out.extend_from_slice(&out_frame);
    }
    (out, frames, bins)
}

/// Adjoint of [`stft_complex`]: maps `∂L/∂Re X + i ∂L/∂Im X` per frame and
/// bin back to `∂L/∂x`.
pub(crate) fn stft_backward(grad: &[Complex64], len: usize, window_size: usize, hop: usize) -> Vec<f64> {
    let win = hann(window_size);
    let bins = window_size / 2 + 1;
    let frames = grad.len() / bins;
    let plan = fft::inverse_plan(window_size);
    let mut spec = plan.make_input_vec();
    let mut buf = plan.make_output_vec();
    let mut out = vec![0.0; len];
    let half = (window_size / 2) as isize;
    for f in 0..frames {
        let g = &grad[f * bins..(f + 1) * bins];
        for (k, s) in spec.iter_mut().enumerate() {
            *s = if k == 0 || k == bins - 1 {
                Complex64::new(g[k].re, 0.0)
            } else {
                g[k] * 0.5
            };
        }
        plan.process(&mut spec, &mut buf)
            .expect("buffer sizes come from the plan");
        let start = (f * hop) as isize - half;
        for (n, v) in buf.iter().enumerate() {
            let idx = start + n as isize;
            if idx >= 0 && (idx as usize) < len {
                out[idx as usize] += v * win[n];
            }
        }
    }
    out
}

/// Hann-windowed magnitude STFT.
pub fn stft_magnitude(x: &[f64], window_size: usize, hop: usize) -> Result<Spectrogram> {
    check_params(x.len(), window_size, hop)?;
    let (spec, frames, bins) = stft_complex(x, window_size, hop);
    Ok(Spectrogram {
        magnitudes: spec.iter().map(|v| v.norm()).collect(),
        frames,
        bins,
        window_size,
        hop,
    })
}
