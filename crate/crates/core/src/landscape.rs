//! Loss profiles along a path between two attenuation settings, optionally
//! repeated over random instances of one frequency-independent parameter.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attenuation::AttenuationParams;
use crate::dsp::{noise_energy_for_snr, noise_with_energy};
use crate::error::{invalid, Error, Result};
use crate::fdn::{render_ir, sample_coprime_delays, FdnParams, FrequencyGrid, ImpulseResponse};
use crate::linalg::random_orthogonal;
use crate::losses::{LossContext, LossKind, TargetFeatures};
use crate::seeds::derive_seed;

/// Interpolation of the step values between the two end states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Log,
}

/// Where background noise is added.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseCondition {
    None,
    /// `L(h + w1, ĥ)`
    TargetOnly {
        snr_db: f64,
    },
    /// `L(h + w1, ĥ + w2)` with `E(w2) = E(w1)`
    NoiseAware {
        snr_db: f64,
    },
}

impl NoiseCondition {
    pub fn snr_db(&self) -> Option<f64> {
        match *self {
            NoiseCondition::None => None,
            NoiseCondition::TargetOnly { snr_db } | NoiseCondition::NoiseAware { snr_db } => Some(snr_db),
        }
    }
}

/// A 1-D path through attenuation space and the conditions of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub theta_start: AttenuationParams,
    pub theta_end: AttenuationParams,
    pub num_steps: usize,
    pub spacing: Spacing,
    pub target: AttenuationParams,
    pub noise: NoiseCondition,
    /// Seconds removed from the start of both responses.
    pub t_mix: f64,
    /// Root of the noise seeds.
    pub seed: u64,
}

fn between(x: f64, a: f64, b: f64) -> bool {
    x >= a.min(b) && x <= a.max(b)
}

impl ProfileSpec {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.num_steps < 3 {
            return Err(invalid("a profile needs at least 3 steps"));
        }
        for a in [&self.theta_start, &self.theta_end, &self.target] {
            a.validate(sample_rate)?;
        }
        if !between(self.target.t60_dc, self.theta_start.t60_dc, self.theta_end.t60_dc)
            || !between(
                self.target.crossover_hz,
                self.theta_start.crossover_hz,
                self.theta_end.crossover_hz,
            )
        {
            return Err(invalid("target must lie between the two end states"));
        }
        if self.t_mix < 0.0 {
            return Err(invalid("t_mix must be non-negative"));
        }
        Ok(())
    }

    /// Attenuation settings at every step.
    pub fn steps(&self) -> Vec<AttenuationParams> {
        let interp = |a: f64, b: f64, u: f64| match self.spacing {
            Spacing::Linear => a + (b - a) * u,
            Spacing::Log => (a.ln() + (b.ln() - a.ln()) * u).exp(),
        };
        (0..self.num_steps)
            .map(|i| {
                let u = i as f64 / (self.num_steps - 1) as f64;
                AttenuationParams::new(
                    interp(self.theta_start.t60_dc, self.theta_end.t60_dc, u),
                    interp(self.theta_start.crossover_hz, self.theta_end.crossover_hz, u),
                    self.theta_start.t60_nyquist,
                )
            })
            .collect()
    }
}

/// Frequency-independent parameter resampled across instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PerturbedParameter {
    /// No parameter change; instances differ only in the model noise.
    #[serde(rename = "none")]
    None,
    #[serde(rename = "b")]
    InputGains,
    #[serde(rename = "c")]
    OutputGains,
    #[serde(rename = "U")]
    Feedback,
    #[serde(rename = "m")]
    Delays,
}

impl PerturbedParameter {
    pub const ALL: [PerturbedParameter; 5] = [
        PerturbedParameter::None,
        PerturbedParameter::InputGains,
        PerturbedParameter::OutputGains,
        PerturbedParameter::Feedback,
        PerturbedParameter::Delays,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbedParameter::None => "none",
            PerturbedParameter::InputGains => "b",
            PerturbedParameter::OutputGains => "c",
            PerturbedParameter::Feedback => "U",
            PerturbedParameter::Delays => "m",
        }
    }
}

impl fmt::Display for PerturbedParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbedParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbedParameter::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid(format!("unknown perturbation '{s}' (expected none, b, c, U or m)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub parameter: PerturbedParameter,
    pub num_instances: usize,
    pub seed: u64,
}

/// Target FDN, energy-matched model FDN and analysis settings.
#[derive(Debug, Clone)]
pub struct LandscapeScene {
    pub target_fdn: FdnParams,
    pub model: FdnParams,
    pub grid: FrequencyGrid,
    pub ctx: LossContext,
}

impl LandscapeScene {
    /// Scales the model's gains so that its energy at `target` equals the
    /// target FDN's energy there.
    pub fn new(
        target_fdn: FdnParams,
        model: FdnParams,
        target: &AttenuationParams,
        grid: FrequencyGrid,
        ctx: LossContext,
    ) -> Result<Self> {
        if target_fdn.sample_rate() != model.sample_rate() {
            return Err(invalid("target and model sample rates differ"));
        }
        let reference = render_ir(&target_fdn, target, &grid)?.energy();
        let model = crate::dsp::match_energy(&model, target, reference, &grid)?;
        Ok(Self {
            target_fdn,
            model,
            grid,
            ctx,
        })
    }

    pub fn sample_rate(&self) -> f64 {
        self.model.sample_rate()
    }
}

/// Loss curve over the steps, summarised across instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub median: Vec<f64>,
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
    /// Argmin of the median curve.
    pub argmin: usize,
    /// Argmin of each instance's own curve.
    pub instance_argmins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    pub steps: Vec<AttenuationParams>,
    pub target: AttenuationParams,
    pub num_instances: usize,
    pub t_mix: f64,
    pub curves: BTreeMap<LossKind, LossCurve>,
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Zero-mean, unit-variance copy of a curve (constant curves map to zeros).
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    values
        .iter()
        .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
        .collect()
}

impl LossProfile {
    /// Step values for the component the path varies (T60 if it changes,
    /// else the crossover).
    pub fn estimates(&self, loss: LossKind) -> Option<Vec<AttenuationParams>> {
        let curve = self.curves.get(&loss)?;
        Some(curve.instance_argmins.iter().map(|&i| self.steps[i]).collect())
    }

    /// CSV with raw, quartile and standardised values per loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t60_dc,crossover_hz");
        for kind in self.curves.keys() {
            out.push_str(&format!(",{k},{k}_q1,{k}_q3,{k}_standardized", k = kind.name()));
        }
        out.push('\n');
        let standardized: Vec<Vec<f64>> = self.curves.values().map(|c| standardize(&c.median)).collect();
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!("{i},{},{}", s.t60_dc, s.crossover_hz));
            for (c, z) in self.curves.values().zip(&standardized) {
                out.push_str(&format!(",{},{},{},{}", c.median[i], c.q1[i], c.q3[i], z[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Argmins and relative errors per loss.
    pub fn summary(&self) -> ProfileSummary {
        let losses = self
            .curves
            .iter()
            .map(|(&kind, c)| {
                let estimates: Vec<AttenuationParams> = c.instance_argmins.iter().map(|&i| self.steps[i]).collect();
                let mae = relative_mae(&estimates, &self.target).expect("at least one instance");
                (
                    kind,
                    LossSummary {
                        argmin: c.argmin,
                        argmin_t60_dc: self.steps[c.argmin].t60_dc,
                        argmin_crossover_hz: self.steps[c.argmin].crossover_hz,
                        instance_argmins: c.instance_argmins.clone(),
                        mae_t60_percent: mae.0,
                        mae_crossover_percent: mae.1,
                    },
                )
            })
            .collect();
        ProfileSummary {
            target: self.target,
            num_steps: self.steps.len(),
            num_instances: self.num_instances,
            t_mix: self.t_mix,
            losses,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub argmin: usize,
    pub argmin_t60_dc: f64,
    pub argmin_crossover_hz: f64,
    pub instance_argmins: Vec<usize>,
    pub mae_t60_percent: f64,
    pub mae_crossover_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub target: AttenuationParams,
    pub num_steps: usize,
    pub num_instances: usize,
    pub t_mix: f64,
    pub losses: BTreeMap<LossKind, LossSummary>,
}

/// Mean relative error in percent of `(t60_dc, crossover_hz)`.
pub fn relative_mae(estimates: &[AttenuationParams], target: &AttenuationParams) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(invalid("relative MAE needs at least one estimate"));
    }
    if !(target.t60_dc > 0.0 && target.crossover_hz > 0.0) {
        return Err(invalid("relative MAE needs positive targets"));
    }
    let n = estimates.len() as f64;
    let t = estimates
        .iter()
        .map(|e| (e.t60_dc - target.t60_dc).abs() / target.t60_dc)
        .sum::<f64>()
        / n;
    let f = estimates
        .iter()
        .map(|e| (e.crossover_hz - target.crossover_hz).abs() / target.crossover_hz)
        .sum::<f64>()
        / n;
    Ok((100.0 * t, 100.0 * f))
}

/// The target response under the spec's noise condition, and the energy of
/// the target noise.
fn noisy_target(scene: &LandscapeScene, spec: &ProfileSpec) -> Result<(ImpulseResponse, f64)> {
    let mut target = render_ir(&scene.target_fdn, &spec.target, &scene.grid)?;
    let Some(snr) = spec.noise.snr_db() else {
        return Ok((target, 0.0));
    };
    let energy = noise_energy_for_snr(target.energy(), snr);
    let w1 = noise_with_energy(target.len(), energy, derive_seed(spec.seed, 1))?;
    for (s, w) in target.samples.iter_mut().zip(&w1) {
        *s += w;
    }
    Ok((target, energy))
}

struct Instance {
    model: FdnParams,
    noise: Option<Vec<f64>>,
}

fn evaluate_instance(
    scene: &LandscapeScene,
    spec: &ProfileSpec,
    features: &TargetFeatures,
    steps: &[AttenuationParams],
    instance: &Instance,
    losses: &[LossKind],
) -> Result<Vec<Vec<f64>>> {
    let skip = (spec.t_mix * scene.sample_rate()).round() as usize;
    let per_step: Vec<Vec<f64>> = steps
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            let tag = |e: Error| Error::AtStep {
                step: i,
                source: Box::new(e),
            };
            let mut signal = render_ir(&instance.model, theta, &scene.grid).map_err(tag)?.samples;
            if let Some(w) = &instance.noise {
                for (s, v) in signal.iter_mut().zip(w) {
                    *s += v;
                }
            }
            let values = features
                .evaluate_many(losses, &signal[skip..], &scene.ctx)
                .map_err(tag)?;
            values
                .into_iter()
                .map(|v| {
                    if v.value.is_finite() {
                        Ok(v.value)
                    } else {
                        Err(tag(Error::NonFinite { stage: "loss" }))
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    // transpose to [loss][step]
    Ok((0..losses.len())
        .map(|l| per_step.iter().map(|s| s[l]).collect())
        .collect())
}

fn model_noise(spec: &ProfileSpec, energy: f64, len: usize, instance: u64) -> Result<Option<Vec<f64>>> {
    match spec.noise {
        NoiseCondition::NoiseAware { .. } => Ok(Some(noise_with_energy(
            len,
            energy,
            derive_seed(spec.seed, 2 + instance),
        )?)),
        _ => Ok(None),
    }
}

fn profile_from_instances(
    spec: &ProfileSpec,
    steps: Vec<AttenuationParams>,
    losses: &[LossKind],
    values: Vec<Vec<Vec<f64>>>, // [instance][loss][step]
) -> LossProfile {
    let k = values.len();
    let curves = losses
        .iter()
        .enumerate()
        .map(|(l, &kind)| {
            let mut median = Vec::with_capacity(steps.len());
            let mut q1 = Vec::with_capacity(steps.len());
            let mut q3 = Vec::with_capacity(steps.len());
            for s in 0..steps.len() {
                let mut col: Vec<f64> = values.iter().map(|inst| inst[l][s]).collect();
                col.sort_by(f64::total_cmp);
                median.push(quantile(&col, 0.5));
                q1.push(quantile(&col, 0.25));
                q3.push(quantile(&col, 0.75));
            }
            let instance_argmins = values.iter().map(|inst| argmin(&inst[l])).collect();
            (
                kind,
                LossCurve {
                    argmin: argmin(&median),
                    median,
                    q1,
                    q3,
                    instance_argmins,
                },
            )
        })
        .collect();
    LossProfile {
        steps,
        target: spec.target,
        num_instances: k,
        t_mix: spec.t_mix,
        curves,
    }
}

fn check_losses(losses: &[LossKind]) -> Result<()> {
    if losses.is_empty() {
        return Err(invalid("select at least one loss"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != losses.len() {
        return Err(invalid("losses must be distinct"));
    }
    Ok(())
}

/// Evaluates each loss at each step for the scene's model.
pub fn compute_profile(scene: &LandscapeScene, spec: &ProfileSpec, losses: &[LossKind]) -> Result<LossProfile> {
    compute_perturbed_profile(
        scene,
        spec,
        &PerturbationSpec {
            parameter: PerturbedParameter::None,
            num_instances: 1,
            seed: 0,
        },
        losses,
    )
}

/// Draws instance `k` of the perturbed parameter.
pub fn perturb_model(base: &FdnParams, pert: &PerturbationSpec, k: usize) -> Result<FdnParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pert.seed, 1000 + k as u64));
    // Entries are drawn from N(mean, std) of the initial vector.
    let resample = |v: &[f64], rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let dist = Normal::new(mean, sd).map_err(|e| invalid(e.to_string()))?;
        Ok((0..v.len()).map(|_| dist.sample(rng)).collect())
    };
    match pert.parameter {
        PerturbedParameter::None => Ok(base.clone()),
        PerturbedParameter::InputGains => {
            let b = resample(base.input_gains(), &mut rng)?;
            base.with_gains(b, base.output_gains().to_vec())
        }
        PerturbedParameter::OutputGains => {
            let c = resample(base.output_gains(), &mut rng)?;
            base.with_gains(base.input_gains().to_vec(), c)
        }
        PerturbedParameter::Feedback => {
            base.with_feedback(random_orthogonal(base.size(), derive_seed(pert.seed, 5000 + k as u64))?)
        }
        PerturbedParameter::Delays => {
            let lo = *base.delays().iter().min().expect("non-empty");
            let hi = *base.delays().iter().max().expect("non-empty");
            base.with_delays(sample_coprime_delays(base.size(), lo, hi, &mut rng)?)
        }
    }
}

/// Loss profile over `K` random instances of one frequency-independent
/// parameter. Energy matching is not redone per instance.
pub fn compute_perturbed_profile(
    scene: &LandscapeScene,
    spec: &ProfileSpec,
    pert: &PerturbationSpec,
    losses: &[LossKind],
) -> Result<LossProfile> {
    spec.validate(scene.sample_rate())?;
    check_losses(losses)?;
    if pert.num_instances == 0 {
        return Err(invalid("need at least one perturbation instance"));
    }
    let (target, noise_energy) = noisy_target(scene, spec)?;
    let skip = (spec.t_mix * scene.sample_rate()).round() as usize;
    if skip >= target.len() {
        return Err(invalid("t_mix exceeds the response length"));
    }
    let features = TargetFeatures::new(&target.samples[skip..], &scene.ctx, losses)?;
    let steps = spec.steps();
    let values = (0..pert.num_instances)
        .map(|k| {
            let instance = Instance {
                model: perturb_model(&scene.model, pert, k)?,
                noise: model_noise(spec, noise_energy, target.len(), k as u64)?,
            };
            evaluate_instance(scene, spec, &features, &steps, &instance, losses)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(profile_from_instances(spec, steps, losses, values))
}

/// One row of a perturbation table: relative MAE per loss, T60 from the
/// T60 sweep and crossover from the crossover sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub parameter: PerturbedParameter,
    /// `loss -> (MAE T60 %, MAE crossover %)`
    pub mae: BTreeMap<LossKind, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTable {
    pub num_instances: usize,
    pub num_steps: usize,
    pub rows: Vec<PerturbationRow>,
}

impl PerturbationTable {
    pub fn row(&self, parameter: PerturbedParameter) -> Option<&PerturbationRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    /// One row per perturbed parameter, two columns per loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter");
        if let Some(first) = self.rows.first() {
            for k in first.mae.keys() {
                out.push_str(&format!(",{k}_t60_mae_percent,{k}_crossover_mae_percent"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(r.parameter.name());
            for (t, f) in r.mae.values() {
                out.push_str(&format!(",{t},{f}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs both sweeps for every perturbed parameter.
pub fn perturbation_table(
    scene: &LandscapeScene,
    t60_sweep: &ProfileSpec,
    crossover_sweep: &ProfileSpec,
    parameters: &[PerturbedParameter],
    num_instances: usize,
    seed: u64,
    losses: &[LossKind],
) -> Result<PerturbationTable> {
    if t60_sweep.num_steps != crossover_sweep.num_steps {
        return Err(invalid("both sweeps must have the same number of steps"));
    }
    let rows = parameters
        .iter()
        .map(|&parameter| {
            let pert = PerturbationSpec {
                parameter,
                num_instances,
                seed: derive_seed(seed, 100 + parameter as u64),
            };
            let t = compute_perturbed_profile(scene, t60_sweep, &pert, losses)?.summary();
            let f = compute_perturbed_profile(scene, crossover_sweep, &pert, losses)?.summary();
            let mae = losses
                .iter()
                .map(|k| (*k, (t.losses[k].mae_t60_percent, f.losses[k].mae_crossover_percent)))
                .collect();
            Ok(PerturbationRow { parameter, mae })
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationTable {
        num_instances,
        num_steps: t60_sweep.num_steps,
        rows,
    })
}
