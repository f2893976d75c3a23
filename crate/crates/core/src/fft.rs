//! Thread-local cached real FFT plans.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

pub(crate) fn forward_plan(len: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

pub(crate) fn inverse_plan(len: usize) -> Arc<dyn ComplexToReal<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Unnormalised forward real FFT; `input` is used as scratch.
pub(crate) fn rfft(input: &mut [f64]) -> Vec<Complex64> {
    let plan = forward_plan(input.len());
    let mut out = plan.make_output_vec();
    plan.process(input, &mut out).expect("buffer sizes come from the plan");
    out
}

/// Unnormalised inverse real FFT of a half spectrum into a signal of length `len`.
///
/// The imaginary parts of the dc bin (and the Nyquist bin for even `len`) are
/// discarded.
pub(crate) fn irfft(spectrum: &mut [Complex64], len: usize) -> Vec<f64> {
    let plan = inverse_plan(len);
    spectrum[0].im = 0.0;
    if len % 2 == 0 {
        spectrum[len / 2].im = 0.0;
    }
    let mut out = plan.make_output_vec();
    plan.process(spectrum, &mut out)
        .expect("buffer sizes come from the plan");
    out
}

/// Smallest 2^a 3^b 5^c not below `n`.
pub(crate) fn fast_len(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p5 = 1usize;
    while p5 < best {
        let mut p35 = p5;
        while p35 < best {
            let mut v = p35;
            while v < n {
                v *= 2;
            }
            best = best.min(v);
            p35 *= 3;
        }
        p5 *= 5;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_len_picks_smooth_sizes() {
        assert_eq!(fast_len(1), 1);
        assert_eq!(fast_len(7), 8);
        assert_eq!(fast_len(11), 12);
        assert_eq!(fast_len(1001), 1024);
        assert_eq!(fast_len(1025), 1080);
    }

    #[test]
    fn roundtrip() {
        let x: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let mut buf = x.clone();
        let mut spec = rfft(&mut buf);
        let y = irfft(&mut spec, x.len());
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b / x.len() as f64).abs() < 1e-12);
        }
    }
}
