//! Frequency-independent FDN parameters and evaluation of the SISO transfer
//! function `cᵀ [D_m(z)⁻¹ − U Γ(z)]⁻¹ b` on a uniform half-circle grid.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft;
use crate::linalg::{orthogonality_error, ComplexLu};

/// Bins per parallel work item. Reductions over bins sum chunk partials in
/// chunk order, so results do not depend on scheduling.
const BIN_CHUNK: usize = 1024;

const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Delay lengths, orthogonal feedback matrix and gain vectors of a SISO FDN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdnParams {
    delays: Vec<usize>,
    feedback: DMatrix<f64>,
    input_gains: Vec<f64>,
    output_gains: Vec<f64>,
    sample_rate: f64,
}

impl FdnParams {
    pub fn new(
        delays: Vec<usize>,
        feedback: DMatrix<f64>,
        input_gains: Vec<f64>,
        output_gains: Vec<f64>,
        sample_rate: f64,
    ) -> Result<Self> {
        let n = delays.len();
        if n == 0 {
            return Err(invalid("an FDN needs at least one delay line"));
        }
        if feedback.nrows() != n || feedback.ncols() != n {
            return Err(invalid(format!(
                "feedback matrix is {}x{}, expected {n}x{n}",
                feedback.nrows(),
                feedback.ncols()
            )));
        }
        if input_gains.len() != n || output_gains.len() != n {
            return Err(invalid("gain vectors must have one entry per delay line"));
        }
        if delays.iter().any(|&m| m == 0) {
            return Err(invalid("delays must be positive"));
        }
        let mut sorted = delays.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("delays must be pairwise distinct"));
        }
        if !(sample_rate > 0.0) {
            return Err(invalid("sample rate must be positive"));
        }
        if input_gains.iter().chain(&output_gains).any(|g| !g.is_finite()) {
            return Err(invalid("gains must be finite"));
        }
        let err = orthogonality_error(&feedback);
        if !(err <= ORTHOGONALITY_TOL) {
            return Err(invalid(format!(
                "feedback matrix is not orthogonal (max |UᵀU − I| = {err:e})"
            )));
        }
        Ok(Self {
            delays,
            feedback,
            input_gains,
            output_gains,
            sample_rate,
        })
    }

    pub fn size(&self) -> usize {
        self.delays.len()
    }

    pub fn delays(&self) -> &[usize] {
        &self.delays
    }

    pub fn feedback(&self) -> &DMatrix<f64> {
        &self.feedback
    }

    pub fn input_gains(&self) -> &[f64] {
        &self.input_gains
    }

    pub fn output_gains(&self) -> &[f64] {
        &self.output_gains
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn with_gains(&self, input_gains: Vec<f64>, output_gains: Vec<f64>) -> Result<Self> {
        Self::new(
            self.delays.clone(),
            self.feedback.clone(),
            input_gains,
            output_gains,
            self.sample_rate,
        )
    }

    pub fn with_feedback(&self, feedback: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.delays.clone(),
            feedback,
            self.input_gains.clone(),
            self.output_gains.clone(),
            self.sample_rate,
        )
    }

    pub fn with_delays(&self, delays: Vec<usize>) -> Result<Self> {
        Self::new(
            delays,
            self.feedback.clone(),
            self.input_gains.clone(),
            self.output_gains.clone(),
            self.sample_rate,
        )
    }
}

/// `M` equispaced points `exp(iπk/(M−1))` from dc to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    points: Vec<Complex64>,
}

pub fn make_frequency_grid(num_bins: usize) -> Result<FrequencyGrid> {
    if num_bins < 2 {
        return Err(invalid("frequency grid needs at least 2 bins"));
    }
    let denom = (num_bins - 1) as f64;
    let points = (0..num_bins)
        .map(|k| {
            if k == 0 {
                Complex64::new(1.0, 0.0)
            } else if k == num_bins - 1 {
                Complex64::new(-1.0, 0.0)
            } else {
                Complex64::from_polar(1.0, PI * k as f64 / denom)
            }
        })
        .collect();
    Ok(FrequencyGrid { points })
}

impl FrequencyGrid {
    pub fn num_bins(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Length of the real signal obtained from a full spectrum on this grid.
    pub fn ir_len(&self) -> usize {
        2 * (self.points.len() - 1)
    }

    /// Bin frequencies in Hz.
    pub fn frequencies_hz(&self, sample_rate: f64) -> Vec<f64> {
        let denom = (self.points.len() - 1) as f64;
        (0..self.points.len())
            .map(|k| 0.5 * sample_rate * k as f64 / denom)
            .collect()
    }

    /// `z^p` at every bin, reduced modulo the transform length for accuracy.
    pub fn powers(&self, p: usize) -> Vec<Complex64> {
        let period = self.ir_len() as u128;
        let denom = (self.points.len() - 1) as f64;
        (0..self.points.len())
            .map(|k| {
                let r = (k as u128 * p as u128) % period;
                match r {
                    0 => Complex64::new(1.0, 0.0),
                    _ => Complex64::from_polar(1.0, PI * r as f64 / denom),
                }
            })
            .collect()
    }
}

/// A sampled real signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl ImpulseResponse {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("impulse response contains non-finite samples"));
        }
        if !(sample_rate > 0.0) {
            return Err(invalid("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

pub(crate) fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Per-line delay phases `z^{m_i}` cached for repeated evaluation.
#[derive(Debug, Clone)]
pub(crate) struct DelayTable {
    /// `[line][bin]`
    pub(crate) phases: Vec<Vec<Complex64>>,
}

impl DelayTable {
    pub(crate) fn new(delays: &[usize], grid: &FrequencyGrid) -> Self {
        Self {
            phases: delays.iter().map(|&m| grid.powers(m)).collect(),
        }
    }
}

/// Per-bin factorisations and states kept for the reverse pass.
pub(crate) struct SolveTape {
    lus: Vec<ComplexLu>,
    /// `x = A⁻¹ b`, bin-major `[bin * n + line]`
    states: Vec<Complex64>,
}

/// Gradient of a real functional of `H` with respect to the FDN inputs.
pub(crate) struct SolveGradient {
    /// Row-major `n × n`.
    pub(crate) feedback: Vec<f64>,
    pub(crate) input_gains: Vec<f64>,
    pub(crate) output_gains: Vec<f64>,
    /// `[line][bin]`, as `∂L/∂Re Γ + i ∂L/∂Im Γ`.
    pub(crate) attenuation: Vec<Vec<Complex64>>,
}

/// Solves `(diag(z^m) − U diag(Γ)) x = b` per bin and returns `H = cᵀ x`.
///
/// `feedback` is row-major. Attenuation is indexed `[line][bin]`.
pub(crate) fn solve_bins(
    feedback: &[f64],
    input_gains: &[f64],
    output_gains: &[f64],
    delays: &DelayTable,
    attenuation: &[Vec<Complex64>],
    keep_tape: bool,
) -> Result<(Vec<Complex64>, Option<SolveTape>)> {
    let n = input_gains.len();
    let m = delays.phases[0].len();
    let b: Vec<Complex64> = input_gains.iter().map(|&v| v.into()).collect();

    let chunks: Vec<Result<(Vec<Complex64>, Vec<ComplexLu>, Vec<Complex64>)>> = (0..m)
        .into_par_iter()
        .step_by(BIN_CHUNK)
        .map(|start| {
            let end = (start + BIN_CHUNK).min(m);
            let mut lu = ComplexLu::new(n);
            let mut x = vec![Complex64::new(0.0, 0.0); n];
            let mut h = Vec::with_capacity(end - start);
            let mut lus = Vec::new();
            let mut states = Vec::new();
            for k in start..end {
                let a = lu.matrix_mut();
                for i in 0..n {
                    for j in 0..n {
                        a[i * n + j] = -feedback[i * n + j] * attenuation[j][k];
                    }
                    a[i * n + i] += delays.phases[i][k];
                }
                if !lu.factor() {
                    return Err(Error::Singular { bin: k });
                }
                lu.solve(&b, &mut x);
                let hk: Complex64 = x.iter().zip(output_gains).map(|(xi, &ci)| xi * ci).sum();
                if !hk.re.is_finite() || !hk.im.is_finite() {
                    return Err(Error::Singular { bin: k });
                }
                h.push(hk);
                if keep_tape {
                    lus.push(lu.clone());
                    states.extend_from_slice(&x);
                }
            }
            Ok((h, lus, states))
        })
        .collect();

    let mut h = Vec::with_capacity(m);
    let mut tape = keep_tape.then(|| SolveTape {
        lus: Vec::with_capacity(m),
        states: Vec::with_capacity(m * n),
    });
    for chunk in chunks {
        let (hc, lus, states) = chunk?;
        h.extend(hc);
        if let Some(t) = tape.as_mut() {
            t.lus.extend(lus);
            t.states.extend(states);
        }
    }
    Ok((h, tape))
}

/// Reverse pass of [`solve_bins`] given the upstream gradient on `H`.
///
/// With `y = A⁻ᵀ c`: `∂L/∂c = Re(Ḡ* x)`, `∂L/∂b = Re(Ḡ* y)`,
/// `∂L/∂U_ij = Re(Ḡ* y_i Γ_j x_j)` and `Γ̄_j = Ḡ · conj((Uᵀy)_j x_j)`.
pub(crate) fn solve_bins_backward(
    tape: &SolveTape,
    feedback: &[f64],
    output_gains: &[f64],
    attenuation: &[Vec<Complex64>],
    grad_h: &[Complex64],
) -> SolveGradient {
    let n = output_gains.len();
    let m = grad_h.len();
    let c: Vec<Complex64> = output_gains.iter().map(|&v| v.into()).collect();

    struct Partial {
        u: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        gamma: Vec<Complex64>, // bin-major within the chunk
    }

    let partials: Vec<Partial> = (0..m)
        .into_par_iter()
        .step_by(BIN_CHUNK)
        .map(|start| {
            let end = (start + BIN_CHUNK).min(m);
            let mut p = Partial {
                u: vec![0.0; n * n],
                b: vec![0.0; n],
                c: vec![0.0; n],
                gamma: Vec::with_capacity((end - start) * n),
            };
            let mut y = vec![Complex64::new(0.0, 0.0); n];
            for k in start..end {
                let g = grad_h[k];
                let x = &tape.states[k * n..(k + 1) * n];
                if g == Complex64::new(0.0, 0.0) {
                    p.gamma.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(n));
                    continue;
                }
                tape.lus[k].solve_transpose(&c, &mut y);
                let gc = g.conj();
                for i in 0..n {
                    p.c[i] += (gc * x[i]).re;
                    p.b[i] += (gc * y[i]).re;
                }
                for j in 0..n {
                    let gx = attenuation[j][k] * x[j];
                    let mut uty = Complex64::new(0.0, 0.0);
                    for i in 0..n {
                        p.u[i * n + j] += (gc * y[i] * gx).re;
                        uty += feedback[i * n + j] * y[i];
                    }
                    p.gamma.push(g * (uty * x[j]).conj());
                }
            }
            p
        })
        .collect();

    let mut out = SolveGradient {
        feedback: vec![0.0; n * n],
        input_gains: vec![0.0; n],
        output_gains: vec![0.0; n],
        attenuation: vec![Vec::with_capacity(m); n],
    };
    for p in partials {
        for (o, v) in out.feedback.iter_mut().zip(&p.u) {
            *o += v;
        }
        for (o, v) in out.input_gains.iter_mut().zip(&p.b) {
            *o += v;
        }
        for (o, v) in out.output_gains.iter_mut().zip(&p.c) {
            *o += v;
        }
        for row in p.gamma.chunks(n) {
            for (line, v) in row.iter().enumerate() {
                out.attenuation[line].push(*v);
            }
        }
    }
    out
}

fn row_major(u: &DMatrix<f64>) -> Vec<f64> {
    let n = u.nrows();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..u.ncols() {
            out.push(u[(i, j)]);
        }
    }
    out
}

pub(crate) fn to_row_major(u: &DMatrix<f64>) -> Vec<f64> {
    row_major(u)
}

/// Evaluates the FDN transfer function on `grid` given per-line attenuation
/// responses `attenuation[line][bin]`.
pub fn fdn_frequency_response(
    params: &FdnParams,
    attenuation: &[Vec<Complex64>],
    grid: &FrequencyGrid,
) -> Result<Vec<Complex64>> {
    let n = params.size();
    if attenuation.len() != n || attenuation.iter().any(|a| a.len() != grid.num_bins()) {
        return Err(invalid("attenuation must provide one response per delay line and bin"));
    }
    for line in attenuation {
        for g in line {
            if !(g.norm() < 1.0) {
                return Err(invalid(
                    "attenuation magnitude must be below 1 at every bin (lossy system)",
                ));
            }
        }
    }
    let table = DelayTable::new(params.delays(), grid);
    let (h, _) = solve_bins(
        &row_major(params.feedback()),
        params.input_gains(),
        params.output_gains(),
        &table,
        attenuation,
        false,
    )?;
    Ok(h)
}

/// Frequency-samples the FDN with proportional shelving attenuation and
/// returns its impulse response.
pub fn render_ir(
    params: &FdnParams,
    atten: &crate::attenuation::AttenuationParams,
    grid: &FrequencyGrid,
) -> Result<ImpulseResponse> {
    let lines = crate::attenuation::line_responses(atten, params.delays(), params.sample_rate(), grid)?;
    let h = fdn_frequency_response(params, &lines, grid)?;
    response_to_ir(&h, params.sample_rate())
}

/// Inverse transform of a half spectrum on the uniform grid into a real
/// signal of length `2(M−1)`.
pub fn response_to_ir(h: &[Complex64], sample_rate: f64) -> Result<ImpulseResponse> {
    if h.len() < 2 {
        return Err(invalid("half spectrum needs at least 2 bins"));
    }
    if h.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(invalid("half spectrum contains non-finite values"));
    }
    let len = 2 * (h.len() - 1);
    let mut spec = h.to_vec();
    let scale = 1.0 / len as f64;
    let samples = fft::irfft(&mut spec, len).into_iter().map(|v| v * scale).collect();
    ImpulseResponse::new(samples, sample_rate)
}

/// Adjoint of [`response_to_ir`]: maps `∂L/∂h` to `∂L/∂Re H + i ∂L/∂Im H`.
pub(crate) fn response_to_ir_backward(grad_ir: &[f64]) -> Vec<Complex64> {
    let len = grad_ir.len();
    let mut buf = grad_ir.to_vec();
    let mut spec = fft::rfft(&mut buf);
    let m = spec.len();
    let scale = 1.0 / len as f64;
    for (k, v) in spec.iter_mut().enumerate() {
        if k == 0 || k == m - 1 {
            *v = Complex64::new(v.re * scale, 0.0);
        } else {
            *v *= 2.0 * scale;
        }
    }
    spec
}

/// Smallest `M` with `2(M−1) ≥ fs · (t60_max + margin)`.
pub fn choose_num_bins(t60_max: f64, sample_rate: f64, margin: f64) -> Result<usize> {
    if !(t60_max > 0.0) {
        return Err(invalid("t60_max must be positive"));
    }
    let samples = (sample_rate * (t60_max + margin)).ceil().max(2.0) as usize;
    Ok(samples.div_ceil(2) + 1)
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn pairwise_coprime(delays: &[usize]) -> bool {
    delays
        .iter()
        .enumerate()
        .all(|(i, &a)| delays[i + 1..].iter().all(|&b| gcd(a, b) == 1))
}

/// Draws `n` pairwise co-prime delays uniformly from `[lo, hi]` by rejection.
pub fn sample_coprime_delays(n: usize, lo: usize, hi: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if lo == 0 || hi < lo {
        return Err(invalid("delay range must be positive and non-empty"));
    }
    if hi - lo + 1 < n {
        return Err(invalid("delay range too narrow"));
    }
    const MAX_TRIES: usize = 1_000_000;
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..MAX_TRIES {
        if out.len() == n {
            break;
        }
        let d = rng.gen_range(lo..=hi);
        if out.iter().all(|&e| gcd(e, d) == 1) {
            out.push(d);
        }
    }
    if out.len() < n {
        return Err(invalid("could not draw enough pairwise co-prime delays"));
    }
    Ok(out)
}
