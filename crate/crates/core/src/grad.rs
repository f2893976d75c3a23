//! Reverse-mode gradients of the training objective with respect to the
//! attenuation parameters `(t60_dc, f_c)` and the frequency-independent
//! parameters `(U, b, c)`.
//!
//! The chain is written out by hand: shelf design → per-bin filter response
//! → per-bin linear solve → inverse real FFT → optional noise and truncation
//! → loss. Each stage has a matching adjoint.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attenuation::{
    design_shelving_jacobian, AttenuationParams, ShelvingCoeffs, ShelvingJacobian, MAX_CROSSOVER_RATIO,
};
use crate::dsp::{noise_with_energy, OctaveFilterBank};
use crate::error::{invalid, Error, Result};
use crate::fdn::{
    make_frequency_grid, render_ir, response_to_ir, response_to_ir_backward, sample_coprime_delays, solve_bins,
    solve_bins_backward, to_row_major, DelayTable, FdnParams, FrequencyGrid, ImpulseResponse, SolveTape,
};
use crate::linalg::{random_orthogonal, skew_exp, skew_exp_pullback};
use crate::losses::{
    compose, sparsity_grad, sparsity_loss, LossContext, LossKind, LossValue, MssConfig, ObjectiveSpec, TargetFeatures,
};

/// Which parameter groups are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub t60_dc: bool,
    pub crossover: bool,
    pub feedback: bool,
    pub input_gains: bool,
    pub output_gains: bool,
}

impl ParamMask {
    pub fn all() -> Self {
        Self {
            t60_dc: true,
            crossover: true,
            feedback: true,
            input_gains: true,
            output_gains: true,
        }
    }

    /// Only `(t60_dc, f_c)` are trainable.
    pub fn attenuation_only() -> Self {
        Self {
            feedback: false,
            input_gains: false,
            output_gains: false,
            ..Self::all()
        }
    }

    pub fn trains_frequency_independent(&self) -> bool {
        self.feedback || self.input_gains || self.output_gains
    }
}

/// Parameters of a model FDN with proportional shelving attenuation.
///
/// Unlike [`FdnParams`], the feedback matrix is not required to be orthogonal
/// so that finite-difference probes can move individual entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub delays: Vec<usize>,
    pub sample_rate: f64,
    pub t60_dc: f64,
    pub crossover_hz: f64,
    pub t60_nyquist: f64,
    pub feedback: DMatrix<f64>,
    pub input_gains: Vec<f64>,
    pub output_gains: Vec<f64>,
    pub mask: ParamMask,
}

impl ParamVector {
    pub fn from_fdn(fdn: &FdnParams, atten: &AttenuationParams, mask: ParamMask) -> Self {
        Self {
            delays: fdn.delays().to_vec(),
            sample_rate: fdn.sample_rate(),
            t60_dc: atten.t60_dc,
            crossover_hz: atten.crossover_hz,
            t60_nyquist: atten.t60_nyquist,
            feedback: fdn.feedback().clone(),
            input_gains: fdn.input_gains().to_vec(),
            output_gains: fdn.output_gains().to_vec(),
            mask,
        }
    }

    pub fn size(&self) -> usize {
        self.delays.len()
    }

    pub fn attenuation(&self) -> AttenuationParams {
        AttenuationParams::new(self.t60_dc, self.crossover_hz, self.t60_nyquist)
    }

    /// Validated [`FdnParams`]; fails if the feedback matrix is not orthogonal.
    pub fn to_fdn(&self) -> Result<FdnParams> {
        FdnParams::new(
            self.delays.clone(),
            self.feedback.clone(),
            self.input_gains.clone(),
            self.output_gains.clone(),
            self.sample_rate,
        )
    }

    fn validate(&self) -> Result<()> {
        let n = self.size();
        if n == 0 {
            return Err(invalid("parameter vector has no delay lines"));
        }
        if self.feedback.shape() != (n, n) || self.input_gains.len() != n || self.output_gains.len() != n {
            return Err(invalid("parameter shapes disagree with the number of delay lines"));
        }
        if self
            .feedback
            .iter()
            .chain(&self.input_gains)
            .chain(&self.output_gains)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite { stage: "parameters" });
        }
        self.attenuation().validate(self.sample_rate)
    }
}

/// `∂L/∂θ` in the shape of [`ParamVector`]. Masked entries are exactly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub t60_dc: f64,
    pub crossover_hz: f64,
    pub feedback: DMatrix<f64>,
    pub input_gains: Vec<f64>,
    pub output_gains: Vec<f64>,
}

impl Gradient {
    fn masked(mut self, mask: &ParamMask) -> Self {
        if !mask.t60_dc {
            self.t60_dc = 0.0;
        }
        if !mask.crossover {
            self.crossover_hz = 0.0;
        }
        if !mask.feedback {
            self.feedback.fill(0.0);
        }
        if !mask.input_gains {
            self.input_gains.iter_mut().for_each(|v| *v = 0.0);
        }
        if !mask.output_gains {
            self.output_gains.iter_mut().for_each(|v| *v = 0.0);
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.t60_dc.is_finite()
            && self.crossover_hz.is_finite()
            && self
                .feedback
                .iter()
                .chain(&self.input_gains)
                .chain(&self.output_gains)
                .all(|v| v.is_finite())
    }
}

/// Fixed noise added to the model response before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelNoise {
    pub energy: f64,
    pub seed: u64,
}

/// Everything that defines the training objective apart from the parameters.
#[derive(Debug, Clone)]
pub struct Objective {
    pub spec: ObjectiveSpec,
    pub ctx: LossContext,
    pub model_noise: Option<ModelNoise>,
    /// Seconds removed from the start of both responses before the loss.
    pub t_mix: f64,
}

/// A target response with its cached analysis, ready for repeated loss and
/// gradient evaluation of models with fixed delays.
#[derive(Debug, Clone)]
pub struct Problem {
    delays: Vec<usize>,
    sample_rate: f64,
    grid: FrequencyGrid,
    table: DelayTable,
    objective: Objective,
    features: TargetFeatures,
    noise: Option<Vec<f64>>,
    skip: usize,
}

struct Forward {
    designs: Vec<(ShelvingCoeffs, ShelvingJacobian)>,
    attenuation: Vec<Vec<Complex64>>,
    feedback: Vec<f64>,
    tape: Option<SolveTape>,
    signal: Vec<f64>,
}

fn check_finite(values: &[f64], stage: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

impl Problem {
    pub fn new(delays: &[usize], grid: FrequencyGrid, target: &ImpulseResponse, objective: Objective) -> Result<Self> {
        if target.len() != grid.ir_len() {
            return Err(invalid(format!(
                "target has {} samples but the grid renders {}",
                target.len(),
                grid.ir_len()
            )));
        }
        if objective.ctx.bank.sample_rate() != target.sample_rate {
            return Err(invalid("filter bank and target sample rates differ"));
        }
        if !(objective.t_mix >= 0.0) || objective.t_mix >= target.duration() {
            return Err(invalid("t_mix must lie in [0, duration)"));
        }
        let skip = (objective.t_mix * target.sample_rate).round() as usize;
        let features = TargetFeatures::new(&target.samples[skip..], &objective.ctx, &LossKind::ALL)?;
        let mut problem = Self {
            delays: delays.to_vec(),
            sample_rate: target.sample_rate,
            table: DelayTable::new(delays, &grid),
            grid,
            objective,
            features,
            noise: None,
            skip,
        };
        if let Some(noise) = problem.objective.model_noise {
            problem.set_model_noise(noise)?;
        }
        Ok(problem)
    }

    /// Replaces the fixed model noise, e.g. to redraw it per iteration.
    pub fn set_model_noise(&mut self, noise: ModelNoise) -> Result<()> {
        self.noise = Some(noise_with_energy(self.grid.ir_len(), noise.energy, noise.seed)?);
        self.objective.model_noise = Some(noise);
        Ok(())
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    fn check_params(&self, p: &ParamVector) -> Result<()> {
        p.validate()?;
        if p.delays != self.delays {
            return Err(invalid("parameter delays differ from the problem's delays"));
        }
        if p.sample_rate != self.sample_rate {
            return Err(invalid("parameter sample rate differs from the target's"));
        }
        Ok(())
    }

    fn forward(&self, p: &ParamVector, keep_tape: bool) -> Result<Forward> {
        self.check_params(p)?;
        let atten = p.attenuation();
        let designs: Vec<(ShelvingCoeffs, ShelvingJacobian)> = p
            .delays
            .iter()
            .map(|&m| design_shelving_jacobian(&atten, m, p.sample_rate))
            .collect::<Result<_>>()?;
        let points = self.grid.points();
        let attenuation: Vec<Vec<Complex64>> = designs
            .iter()
            .map(|(c, _)| {
                points
                    .iter()
                    .map(|z| {
                        let w = z.conj();
                        (c.b0 + c.b1 * w) / (c.a0 + c.a1 * w)
                    })
                    .collect()
            })
            .collect();
        let feedback = to_row_major(&p.feedback);
        let (h, tape) = solve_bins(
            &feedback,
            &p.input_gains,
            &p.output_gains,
            &self.table,
            &attenuation,
            keep_tape,
        )?;
        let mut signal = response_to_ir(&h, p.sample_rate)
            .map_err(|_| Error::NonFinite {
                stage: "inverse transform",
            })?
            .samples;
        if let Some(noise) = &self.noise {
            for (s, w) in signal.iter_mut().zip(noise) {
                *s += w;
            }
        }
        signal.drain(..self.skip);
        Ok(Forward {
            designs,
            attenuation,
            feedback,
            tape,
            signal,
        })
    }

    /// The model signal exactly as the loss sees it (noise added, truncated).
    pub fn model_signal(&self, p: &ParamVector) -> Result<Vec<f64>> {
        Ok(self.forward(p, false)?.signal)
    }

    fn sparsity(&self, p: &ParamVector) -> Result<f64> {
        if self.objective.spec.sparsity_weight == 0.0 {
            Ok(0.0)
        } else {
            sparsity_loss(&p.feedback)
        }
    }

    /// Objective value without the gradient.
    pub fn loss(&self, p: &ParamVector) -> Result<LossValue> {
        let fwd = self.forward(p, false)?;
        let spec = &self.objective.spec;
        let primary = self.features.evaluate(spec.primary, &fwd.signal, &self.objective.ctx)?;
        let out = compose(spec, &primary, self.sparsity(p)?);
        if !out.value.is_finite() {
            return Err(Error::NonFinite { stage: "loss" });
        }
        Ok(out)
    }

    /// Several signal losses of the same model (no sparsity term).
    pub fn losses(&self, p: &ParamVector, kinds: &[LossKind]) -> Result<Vec<LossValue>> {
        let fwd = self.forward(p, false)?;
        let out = self.features.evaluate_many(kinds, &fwd.signal, &self.objective.ctx)?;
        if out.iter().any(|v| !v.value.is_finite()) {
            return Err(Error::NonFinite { stage: "loss" });
        }
        Ok(out)
    }

    /// Objective value and its gradient with respect to the constrained
    /// parameters.
    pub fn loss_and_gradient(&self, p: &ParamVector) -> Result<(LossValue, Gradient)> {
        let fwd = self.forward(p, true)?;
        let spec = &self.objective.spec;
        let (primary, g_signal) = self
            .features
            .value_and_grad(spec.primary, &fwd.signal, &self.objective.ctx)?;
        let value = compose(spec, &primary, self.sparsity(p)?);
        if !value.value.is_finite() {
            return Err(Error::NonFinite { stage: "loss" });
        }
        check_finite(&g_signal, "loss gradient")?;

        let mut g_ir = vec![0.0; self.skip];
        g_ir.extend(g_signal.iter().map(|g| g * spec.primary_weight));
        let g_h = response_to_ir_backward(&g_ir);
        let tape = fwd.tape.as_ref().expect("tape requested");
        let sg = solve_bins_backward(tape, &fwd.feedback, &p.output_gains, &fwd.attenuation, &g_h);

        let points = self.grid.points();
        let mut d_t60 = 0.0;
        let mut d_fc = 0.0;
        for ((coeffs, jac), (gamma, g_gamma)) in fwd.designs.iter().zip(fwd.attenuation.iter().zip(&sg.attenuation)) {
            // Γ = (b0 + b1 w)/(a0 + a1 w) with w = z⁻¹; dL = Re(conj(Γ̄) dΓ)
            let mut dc = [0.0; 4];
            for ((z, g), gb) in points.iter().zip(gamma).zip(g_gamma) {
                let w = z.conj();
                let inv_d = 1.0 / (coeffs.a0 + coeffs.a1 * w);
                let gc = gb.conj() * inv_d;
                dc[0] += gc.re;
                dc[1] += (gc * w).re;
                let gg = gc * g;
                dc[2] -= gg.re;
                dc[3] -= (gg * w).re;
            }
            d_t60 += dc.iter().zip(&jac.d_t60).map(|(a, b)| a * b).sum::<f64>();
            d_fc += dc.iter().zip(&jac.d_fc).map(|(a, b)| a * b).sum::<f64>();
        }

        let n = p.size();
        let mut feedback = DMatrix::from_row_slice(n, n, &sg.feedback);
        if spec.sparsity_weight != 0.0 {
            feedback += sparsity_grad(&p.feedback) * spec.sparsity_weight;
        }
        let grad = Gradient {
            t60_dc: d_t60,
            crossover_hz: d_fc,
            feedback,
            input_gains: sg.input_gains,
            output_gains: sg.output_gains,
        }
        .masked(&p.mask);
        if !grad.is_finite() {
            return Err(Error::NonFinite { stage: "gradient" });
        }
        Ok((value, grad))
    }
}

/// One-shot objective and gradient for `params` against `target`.
pub fn loss_and_gradient(
    params: &ParamVector,
    target: &ImpulseResponse,
    objective: Objective,
) -> Result<(LossValue, Gradient)> {
    let grid = make_frequency_grid(target.len() / 2 + 1)?;
    if grid.ir_len() != target.len() {
        return Err(invalid("target length must be even"));
    }
    Problem::new(&params.delays, grid, target, objective)?.loss_and_gradient(params)
}

/// Lower end of the crossover range used by [`Parameterization`].
pub const CROSSOVER_FLOOR_HZ: f64 = 100.0;
/// Reference decay time: a raw value of 0 maps to this.
pub const T60_REFERENCE: f64 = 1.0;

/// Unconstrained parameters optimised by gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawParams {
    /// `t60_dc = T60_REFERENCE · exp(t60)`
    pub t60: f64,
    /// `f_c = f_lo + (f_hi − f_lo) · σ(crossover)`
    pub crossover: f64,
    /// `U = expm(W − Wᵀ)`
    pub generator: DMatrix<f64>,
    pub input_gains: Vec<f64>,
    pub output_gains: Vec<f64>,
}

/// Gradient with respect to [`RawParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGradient {
    pub t60: f64,
    pub crossover: f64,
    pub generator: DMatrix<f64>,
    pub input_gains: Vec<f64>,
    pub output_gains: Vec<f64>,
}

/// Fixed structure that maps [`RawParams`] to a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameterization {
    pub delays: Vec<usize>,
    pub sample_rate: f64,
    pub t60_nyquist: f64,
    pub mask: ParamMask,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Parameterization {
    pub fn crossover_range(&self) -> (f64, f64) {
        (CROSSOVER_FLOOR_HZ, MAX_CROSSOVER_RATIO * self.sample_rate)
    }

    pub fn raw_t60(t60: f64) -> f64 {
        (t60 / T60_REFERENCE).ln()
    }

    pub fn raw_crossover(&self, fc: f64) -> Result<f64> {
        let (lo, hi) = self.crossover_range();
        if !(fc > lo && fc < hi) {
            return Err(invalid(format!("crossover {fc} Hz outside ({lo}, {hi})")));
        }
        let q = (fc - lo) / (hi - lo);
        Ok((q / (1.0 - q)).ln())
    }

    pub fn reparameterize(&self, raw: &RawParams) -> ParamVector {
        let (lo, hi) = self.crossover_range();
        ParamVector {
            delays: self.delays.clone(),
            sample_rate: self.sample_rate,
            t60_dc: T60_REFERENCE * raw.t60.exp(),
            crossover_hz: lo + (hi - lo) * sigmoid(raw.crossover),
            t60_nyquist: self.t60_nyquist,
            feedback: skew_exp(&raw.generator),
            input_gains: raw.input_gains.clone(),
            output_gains: raw.output_gains.clone(),
            mask: self.mask,
        }
    }

    /// Chain rule from constrained to raw coordinates.
    pub fn pullback(&self, raw: &RawParams, grad: &Gradient) -> RawGradient {
        let (lo, hi) = self.crossover_range();
        let s = sigmoid(raw.crossover);
        let generator = if self.mask.feedback {
            skew_exp_pullback(&raw.generator, &grad.feedback)
        } else {
            DMatrix::zeros(raw.generator.nrows(), raw.generator.ncols())
        };
        RawGradient {
            t60: grad.t60_dc * T60_REFERENCE * raw.t60.exp(),
            crossover: grad.crossover_hz * (hi - lo) * s * (1.0 - s),
            generator,
            input_gains: grad.input_gains.clone(),
            output_gains: grad.output_gains.clone(),
        }
    }
}

/// Settings for the finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Central-difference step relative to the parameter magnitude.
    pub rel_step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub label: String,
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn trainable_entries(p: &ParamVector) -> Vec<(String, Box<dyn Fn(&mut ParamVector) -> &mut f64>)> {
    let mut out: Vec<(String, Box<dyn Fn(&mut ParamVector) -> &mut f64>)> = Vec::new();
    if p.mask.t60_dc {
        out.push(("t60_dc".into(), Box::new(|q| &mut q.t60_dc)));
    }
    if p.mask.crossover {
        out.push(("crossover_hz".into(), Box::new(|q| &mut q.crossover_hz)));
    }
    let n = p.size();
    if p.mask.feedback {
        for i in 0..n {
            for j in 0..n {
                out.push((format!("U[{i},{j}]"), Box::new(move |q| &mut q.feedback[(i, j)])));
            }
        }
    }
    if p.mask.input_gains {
        for i in 0..n {
            out.push((format!("b[{i}]"), Box::new(move |q| &mut q.input_gains[i])));
        }
    }
    if p.mask.output_gains {
        for i in 0..n {
            out.push((format!("c[{i}]"), Box::new(move |q| &mut q.output_gains[i])));
        }
    }
    out
}

fn gradient_entry(g: &Gradient, name: &str) -> f64 {
    let idx = |s: &str| -> Vec<usize> {
        s.trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(|v| v.parse().expect("index"))
            .collect()
    };
    match name {
        "t60_dc" => g.t60_dc,
        "crossover_hz" => g.crossover_hz,
        _ if name.starts_with('U') => {
            let ij = idx(&name[1..]);
            g.feedback[(ij[0], ij[1])]
        }
        _ if name.starts_with('b') => g.input_gains[idx(&name[1..])[0]],
        _ => g.output_gains[idx(&name[1..])[0]],
    }
}

/// Compares the reverse-mode gradient with central finite differences for
/// every trainable entry.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, floor)` where
/// `floor = 1e-6 · max |n|` guards entries that are numerically zero.
pub fn gradcheck(
    problem: &Problem,
    params: &ParamVector,
    opts: &GradcheckOptions,
    label: &str,
) -> Result<GradcheckReport> {
    let (_, grad) = problem.loss_and_gradient(params)?;
    let mut raw = Vec::new();
    for (name, access) in trainable_entries(params) {
        let mut plus = params.clone();
        let x = *access(&mut plus);
        let h = opts.rel_step * x.abs().max(1e-2);
        *access(&mut plus) = x + h;
        let mut minus = params.clone();
        *access(&mut minus) = x - h;
        let numeric = (problem.loss(&plus)?.value - problem.loss(&minus)?.value) / (2.0 * h);
        raw.push((name.clone(), gradient_entry(&grad, &name), numeric));
    }
    let floor = 1e-6 * raw.iter().map(|e| e.2.abs()).fold(0.0, f64::max);
    let entries: Vec<GradcheckEntry> = raw
        .into_iter()
        .map(|(parameter, analytic, numeric)| {
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            let rel_error = if scale > 0.0 {
                (analytic - numeric).abs() / scale
            } else {
                0.0
            };
            GradcheckEntry {
                parameter,
                analytic,
                numeric,
                rel_error,
            }
        })
        .collect();
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        label: label.to_string(),
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
    })
}

/// Problem and parameters of a small random instance for gradient checks.
pub fn gradcheck_instance(
    primary: LossKind,
    sparsity_weight: f64,
    seed: u64,
    num_bins: usize,
    model_noise: bool,
    t_mix: f64,
) -> Result<(Problem, ParamVector)> {
    const N: usize = 4;
    let fs = 16_000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = make_frequency_grid(num_bins)?;

    let target_delays = sample_coprime_delays(N, 150, 500, &mut rng)?;
    let target_fdn = FdnParams::new(
        target_delays,
        random_orthogonal(N, seed ^ 0x5eed)?,
        vec![0.5, -0.5, 0.5, -0.5],
        vec![0.5; N],
        fs,
    )?;
    // For the log-magnitude losses a much louder target keeps log|H| − log|Ĥ|
    // away from zero in every STFT bin, so the finite differences never
    // straddle an |·| kink.
    let mut target = render_ir(&target_fdn, &AttenuationParams::new(1.2, 2000.0, 0.3), &grid)?;
    if matches!(primary, LossKind::Mss | LossKind::Sm) {
        target.samples.iter_mut().for_each(|v| *v *= 1e3);
    }

    let jitter = |rng: &mut ChaCha8Rng, scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    };
    let delays = sample_coprime_delays(N, 150, 500, &mut rng)?;
    let params = ParamVector {
        delays: delays.clone(),
        sample_rate: fs,
        t60_dc: 0.9 + 0.2 * jitter(&mut rng, 1.0).abs(),
        crossover_hz: 1500.0 + 200.0 * jitter(&mut rng, 1.0),
        t60_nyquist: 0.3,
        feedback: random_orthogonal(N, seed.wrapping_add(17))?,
        input_gains: (0..N).map(|_| jitter(&mut rng, 0.5)).collect(),
        output_gains: (0..N).map(|_| jitter(&mut rng, 0.5)).collect(),
        mask: ParamMask::all(),
    };
    let objective = Objective {
        spec: ObjectiveSpec::new(primary, sparsity_weight),
        ctx: LossContext::new(MssConfig::default(), OctaveFilterBank::octaves(fs)?)?,
        model_noise: model_noise.then_some(ModelNoise {
            energy: 0.01 * target.energy(),
            seed: seed.wrapping_add(99),
        }),
        t_mix,
    };
    Ok((Problem::new(&delays, grid, &target, objective)?, params))
}

/// Gradient checks for every loss on small random instances, including the
/// sparsity term, model noise and mixing-time truncation.
pub fn gradcheck_suite(opts: &GradcheckOptions, seed: u64, num_bins: usize) -> Result<Vec<GradcheckReport>> {
    let mut cases: Vec<(String, LossKind, f64, bool, f64)> = LossKind::ALL
        .iter()
        .map(|&k| (k.name().to_string(), k, 0.0, false, 0.0))
        .collect();
    cases.push(("edc_log+sparsity".into(), LossKind::EdcLog, 0.5, false, 0.0));
    cases.push(("mss+noise".into(), LossKind::Mss, 0.0, true, 0.0));
    cases.push(("edc_lin+noise+t_mix".into(), LossKind::EdcLin, 1.0, true, 0.02));
    cases
        .iter()
        .enumerate()
        .map(|(i, (label, kind, w, noise, t_mix))| {
            let (problem, params) =
                gradcheck_instance(*kind, *w, seed.wrapping_add(i as u64), num_bins, *noise, *t_mix)?;
            gradcheck(&problem, &params, opts, label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_only_gradient_matches_closed_form() {
        let (problem, mut params) = gradcheck_instance(LossKind::EdcLin, 1.0, 3, 1025, false, 0.0).unwrap();
        params.feedback = DMatrix::identity(4, 4);
        let mut spec = problem.objective().spec;
        spec.primary_weight = 0.0;
        let mut objective = problem.objective().clone();
        objective.spec = spec;
        let grid = problem.grid().clone();
        let target = ImpulseResponse::new(vec![1.0; grid.ir_len()], 16_000.0).unwrap();
        let p2 = Problem::new(&params.delays, grid, &target, objective).unwrap();
        let (_, g) = p2.loss_and_gradient(&params).unwrap();
        let expect = -1.0 / (4.0 * (2.0 - 1.0));
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { expect } else { 0.0 };
                assert_eq!(g.feedback[(i, j)], want);
            }
        }
        assert_eq!(g.t60_dc, 0.0);
        assert!(g.input_gains.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_groups_are_exactly_zero() {
        let (problem, mut params) = gradcheck_instance(LossKind::Mss, 0.5, 4, 1025, false, 0.0).unwrap();
        params.mask = ParamMask::attenuation_only();
        let (_, g) = problem.loss_and_gradient(&params).unwrap();
        assert!(g.feedback.iter().all(|&v| v == 0.0));
        assert!(g.input_gains.iter().chain(&g.output_gains).all(|&v| v == 0.0));
        assert!(g.t60_dc != 0.0 && g.crossover_hz != 0.0);
    }

    #[test]
    fn reparameterization_examples() {
        let param = Parameterization {
            delays: vec![100, 150],
            sample_rate: 16_000.0,
            t60_nyquist: 0.5,
            mask: ParamMask::all(),
        };
        let raw = |t60: f64, fc: f64| RawParams {
            t60,
            crossover: fc,
            generator: DMatrix::zeros(2, 2),
            input_gains: vec![1.0, 1.0],
            output_gains: vec![1.0, 1.0],
        };
        let p = param.reparameterize(&raw(0.0, 0.0));
        assert_eq!(p.t60_dc, 1.0);
        assert_eq!(p.feedback, DMatrix::identity(2, 2));
        let (lo, hi) = param.crossover_range();
        assert_eq!(param.reparameterize(&raw(0.0, -1e3)).crossover_hz, lo);
        assert_eq!(param.reparameterize(&raw(0.0, 1e3)).crossover_hz, hi);
        let fc = 2500.0;
        let back = param
            .reparameterize(&raw(0.0, param.raw_crossover(fc).unwrap()))
            .crossover_hz;
        assert!((back - fc).abs() < 1e-9);
        assert!((Parameterization::raw_t60(2.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let (problem, params) = gradcheck_instance(LossKind::EdcLog, 0.3, 5, 1025, false, 0.0).unwrap();
        let n = params.size();
        let param = Parameterization {
            delays: params.delays.clone(),
            sample_rate: params.sample_rate,
            t60_nyquist: params.t60_nyquist,
            mask: ParamMask::all(),
        };
        let mut raw = RawParams {
            t60: Parameterization::raw_t60(params.t60_dc),
            crossover: param.raw_crossover(params.crossover_hz).unwrap(),
            generator: DMatrix::from_fn(n, n, |i, j| 0.1 * ((i * n + j) as f64).sin()),
            input_gains: params.input_gains.clone(),
            output_gains: params.output_gains.clone(),
        };
        let (_, g) = problem.loss_and_gradient(&param.reparameterize(&raw)).unwrap();
        let rg = param.pullback(&raw, &g);
        let f = |r: &RawParams| problem.loss(&param.reparameterize(r)).unwrap().value;
        let h = 1e-5;
        let base = raw.clone();
        raw.t60 += h;
        let up = f(&raw);
        raw.t60 -= 2.0 * h;
        let fd = (up - f(&raw)) / (2.0 * h);
        assert!((fd - rg.t60).abs() < 1e-4 * fd.abs(), "{fd} {}", rg.t60);
        let mut raw = base.clone();
        raw.crossover += h;
        let up = f(&raw);
        raw.crossover -= 2.0 * h;
        let fd = (up - f(&raw)) / (2.0 * h);
        assert!((fd - rg.crossover).abs() < 1e-4 * fd.abs(), "{fd} {}", rg.crossover);
        let mut raw = base.clone();
        raw.generator[(0, 2)] += h;
        let up = f(&raw);
        raw.generator[(0, 2)] -= 2.0 * h;
        let fd = (up - f(&raw)) / (2.0 * h);
        let an = rg.generator[(0, 2)];
        assert!((fd - an).abs() < 1e-4 * fd.abs(), "{fd} {an}");
    }

    #[test]
    fn deterministic() {
        let (problem, params) = gradcheck_instance(LossKind::Mss, 0.5, 6, 1025, true, 0.0).unwrap();
        let a = problem.loss_and_gradient(&params).unwrap();
        let b = problem.loss_and_gradient(&params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn suite_agrees_with_finite_differences() {
        let reports = gradcheck_suite(&GradcheckOptions::default(), 11, 4096).unwrap();
        for r in &reports {
            let worst = r
                .entries
                .iter()
                .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                .unwrap();
            println!(
                "{}: max rel {:.2e} at {} ({} vs {})",
                r.label, r.max_rel_error, worst.parameter, worst.analytic, worst.numeric
            );
        }
        assert!(reports.iter().all(|r| r.passed));
    }
}
