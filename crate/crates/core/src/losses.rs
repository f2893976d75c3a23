//! Training losses on impulse responses: multi-scale spectral (spectral
//! convergence + log magnitude), band-wise EDC distance on linear or dB
//! scale, and the feedback-matrix sparsity penalty.
//!
//! Every loss has a forward form on raw signals and a `value_and_grad` form
//! returning `∂L/∂ĥ` for the model signal, used by [`crate::grad`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    check_stft_params, frame_count, schroeder_edc, stft_backward, stft_complex, to_db, EdcScale, OctaveFilterBank,
    Spectrogram, EDC_FLOOR_LINEAR,
};
use crate::error::{invalid, Result};

/// Magnitudes are clamped to this value before taking logs.
pub const LOG_CLAMP: f64 = 1e-10;

/// STFT resolutions averaged by the multi-scale spectral loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MssConfig {
    /// `(window_size, hop)` pairs with ascending windows.
    pub resolutions: Vec<(usize, usize)>,
}

impl Default for MssConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![(512, 256), (1024, 512), (2048, 1024)],
        }
    }
}

impl MssConfig {
    pub fn new(resolutions: Vec<(usize, usize)>) -> Result<Self> {
        let cfg = Self { resolutions };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(invalid("MSS needs at least one resolution"));
        }
        if self.resolutions.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("MSS windows must be strictly ascending"));
        }
        Ok(())
    }
}

/// A loss value together with named sub-terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self {
            value,
            components: BTreeMap::new(),
        }
    }
}

/// Losses computed on impulse responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// EDC distance on linear energy.
    EdcLin,
    /// EDC distance on dB energy.
    EdcLog,
    /// Multi-scale spectral loss.
    Mss,
    /// Spectral convergence averaged over the MSS resolutions.
    Sc,
    /// Log-magnitude distance averaged over the MSS resolutions.
    Sm,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::EdcLin,
        LossKind::EdcLog,
        LossKind::Mss,
        LossKind::Sc,
        LossKind::Sm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::EdcLin => "edc_lin",
            LossKind::EdcLog => "edc_log",
            LossKind::Mss => "mss",
            LossKind::Sc => "sc",
            LossKind::Sm => "sm",
        }
    }

    fn uses_stft(self) -> bool {
        matches!(self, LossKind::Mss | LossKind::Sc | LossKind::Sm)
    }

    fn edc_scale(self) -> Option<EdcScale> {
        match self {
            LossKind::EdcLin => Some(EdcScale::Linear),
            LossKind::EdcLog => Some(EdcScale::Db),
            _ => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown loss '{s}'")))
    }
}

/// Analysis settings shared by all signal losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossContext {
    pub mss: MssConfig,
    pub bank: OctaveFilterBank,
}

impl LossContext {
    pub fn new(mss: MssConfig, bank: OctaveFilterBank) -> Result<Self> {
        mss.validate()?;
        Ok(Self { mss, bank })
    }
}

fn check_lengths(h: &[f64], model: &[f64]) -> Result<()> {
    if h.len() != model.len() {
        return Err(invalid(format!(
            "signal lengths differ ({} vs {})",
            h.len(),
            model.len()
        )));
    }
    Ok(())
}

fn magnitudes(x: &[f64], window: usize, hop: usize) -> Result<Vec<f64>> {
    check_stft_params(x.len(), window, hop)?;
    Ok(stft_complex(x, window, hop).0.iter().map(|v| v.norm()).collect())
}

fn frobenius(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum::<f64>().sqrt()
}

fn clamped_log(v: f64) -> f64 {
    v.max(LOG_CLAMP).ln()
}

fn sc_from_mags(target: &[f64], model: &[f64]) -> Result<f64> {
    let denom = frobenius(target.iter().copied());
    if !(denom > 0.0) {
        return Err(invalid("spectral convergence needs a non-zero target"));
    }
    Ok(frobenius(target.iter().zip(model).map(|(a, b)| a - b)) / denom)
}

fn sm_from_mags(target: &[f64], model: &[f64], frames: usize) -> f64 {
    target
        .iter()
        .zip(model)
        .map(|(&a, &b)| (clamped_log(a) - clamped_log(b)).abs())
        .sum::<f64>()
        / frames as f64
}

/// `‖|H| − |Ĥ|‖_F / ‖|H|‖_F` for one STFT resolution.
pub fn spectral_convergence(h: &[f64], model: &[f64], window: usize, hop: usize) -> Result<f64> {
    check_lengths(h, model)?;
    sc_from_mags(&magnitudes(h, window, hop)?, &magnitudes(model, window, hop)?)
}

/// `(1/S) ‖log|H| − log|Ĥ|‖₁` for one STFT resolution.
pub fn spectral_log_magnitude(h: &[f64], model: &[f64], window: usize, hop: usize) -> Result<f64> {
    check_lengths(h, model)?;
    let a = magnitudes(h, window, hop)?;
    let b = magnitudes(model, window, hop)?;
    Ok(sm_from_mags(&a, &b, frame_count(h.len(), hop)))
}

/// Mean over resolutions of spectral convergence plus log magnitude.
pub fn mss_loss(h: &[f64], model: &[f64], cfg: &MssConfig) -> Result<LossValue> {
    check_lengths(h, model)?;
    let features = TargetFeatures::stft_only(h, cfg)?;
    let (sc, sm) = features.stft_terms(model, cfg)?;
    Ok(combine_stft(LossKind::Mss, &sc, &sm, cfg))
}

/// Band-wise EDC distance normalised by the target EDC energy.
pub fn edc_loss(h: &[f64], model: &[f64], bank: &OctaveFilterBank, scale: EdcScale) -> Result<LossValue> {
    check_lengths(h, model)?;
    let target: Vec<Vec<f64>> = bank.apply(h).iter().map(|b| schroeder_edc(b, scale)).collect();
    let model: Vec<Vec<f64>> = bank.apply(model).iter().map(|b| schroeder_edc(b, scale)).collect();
    edc_distance(&target, &model, bank.centers())
}

fn edc_distance(target: &[Vec<f64>], model: &[Vec<f64>], centers: &[f64]) -> Result<LossValue> {
    let denom: f64 = target.iter().flatten().map(|v| v * v).sum();
    if !(denom > 0.0) {
        return Err(invalid("EDC loss needs a target with non-zero decay curve"));
    }
    let mut components = BTreeMap::new();
    let mut total = 0.0;
    for ((t, m), fc) in target.iter().zip(model).zip(centers) {
        let num: f64 = t.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
        components.insert(format!("band@{fc}"), num / denom);
        total += num;
    }
    Ok(LossValue {
        value: total / denom,
        components,
    })
}

/// `(N√N − Σ|U_ij|) / (N(√N − 1))`.
pub fn sparsity_loss(u: &DMatrix<f64>) -> Result<f64> {
    let n = u.nrows();
    if u.ncols() != n {
        return Err(invalid("sparsity loss needs a square matrix"));
    }
    if n < 2 {
        return Err(invalid("sparsity loss is undefined for N = 1"));
    }
    let nf = n as f64;
    let sum: f64 = u.iter().map(|v| v.abs()).sum();
    Ok((nf * nf.sqrt() - sum) / (nf * (nf.sqrt() - 1.0)))
}

pub(crate) fn sparsity_grad(u: &DMatrix<f64>) -> DMatrix<f64> {
    let nf = u.nrows() as f64;
    let scale = -1.0 / (nf * (nf.sqrt() - 1.0));
    u.map(|v| scale * sign(v))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Element-wise STFT distance maps between two signals.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceMaps {
    /// `|log|H| − log|Ĥ||`
    pub log_map: Spectrogram,
    /// `||H| − |Ĥ||`
    pub linear_map: Spectrogram,
}

pub fn stft_distance_maps(h: &[f64], model: &[f64], window: usize, hop: usize) -> Result<DistanceMaps> {
    check_lengths(h, model)?;
    let a = crate::dsp::stft_magnitude(h, window, hop)?;
    let b = crate::dsp::stft_magnitude(model, window, hop)?;
    let map = |f: &dyn Fn(f64, f64) -> f64| Spectrogram {
        magnitudes: a.magnitudes.iter().zip(&b.magnitudes).map(|(&x, &y)| f(x, y)).collect(),
        ..a.clone()
    };
    Ok(DistanceMaps {
        log_map: map(&|x, y| (clamped_log(x) - clamped_log(y)).abs()),
        linear_map: map(&|x, y| (x - y).abs()),
    })
}

/// Primary loss plus weighted sparsity penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub primary: LossKind,
    pub primary_weight: f64,
    pub sparsity_weight: f64,
}

impl ObjectiveSpec {
    pub fn new(primary: LossKind, sparsity_weight: f64) -> Self {
        Self {
            primary,
            primary_weight: 1.0,
            sparsity_weight,
        }
    }
}

pub(crate) fn compose(spec: &ObjectiveSpec, primary: &LossValue, sparsity: f64) -> LossValue {
    let mut components = BTreeMap::new();
    let p = spec.primary_weight * primary.value;
    let s = spec.sparsity_weight * sparsity;
    components.insert(spec.primary.name().to_string(), p);
    components.insert("sparsity".to_string(), s);
    LossValue {
        value: p + s,
        components,
    }
}

/// Weighted sum of a primary signal loss and `sparsity_loss(u)`.
pub fn composite_objective(
    h: &[f64],
    model: &[f64],
    u: &DMatrix<f64>,
    spec: &ObjectiveSpec,
    ctx: &LossContext,
) -> Result<LossValue> {
    if spec.primary_weight < 0.0 || spec.sparsity_weight < 0.0 {
        return Err(invalid("objective weights must be non-negative"));
    }
    let primary = evaluate(spec.primary, h, model, ctx)?;
    let sparsity = if spec.sparsity_weight == 0.0 {
        0.0
    } else {
        sparsity_loss(u)?
    };
    Ok(compose(spec, &primary, sparsity))
}

/// Evaluates one loss between target `h` and `model`.
pub fn evaluate(kind: LossKind, h: &[f64], model: &[f64], ctx: &LossContext) -> Result<LossValue> {
    check_lengths(h, model)?;
    TargetFeatures::new(h, ctx, &[kind])?.evaluate(kind, model, ctx)
}

fn combine_stft(kind: LossKind, sc: &[f64], sm: &[f64], cfg: &MssConfig) -> LossValue {
    let r = cfg.resolutions.len() as f64;
    let mut components = BTreeMap::new();
    let mut total = 0.0;
    for ((&(w, _), &a), &b) in cfg.resolutions.iter().zip(sc).zip(sm) {
        if kind != LossKind::Sm {
            components.insert(format!("sc@{w}"), a / r);
            total += a;
        }
        if kind != LossKind::Sc {
            components.insert(format!("sm@{w}"), b / r);
            total += b;
        }
    }
    LossValue {
        value: total / r,
        components,
    }
}

/// Target-side analysis cached for repeated comparisons against models.
#[derive(Debug, Clone)]
pub struct TargetFeatures {
    len: usize,
    /// Per MSS resolution: magnitudes, frame count, Frobenius norm.
    stft: Vec<(Vec<f64>, usize, f64)>,
    edc_lin: Option<Vec<Vec<f64>>>,
    edc_db: Option<Vec<Vec<f64>>>,
}

impl TargetFeatures {
    pub fn new(h: &[f64], ctx: &LossContext, kinds: &[LossKind]) -> Result<Self> {
        let mut out = if kinds.iter().any(|k| k.uses_stft()) {
            Self::stft_only(h, &ctx.mss)?
        } else {
            Self {
                len: h.len(),
                stft: Vec::new(),
                edc_lin: None,
                edc_db: None,
            }
        };
        let need_lin = kinds.contains(&LossKind::EdcLin);
        let need_db = kinds.contains(&LossKind::EdcLog);
        if need_lin || need_db {
            let bands = ctx.bank.apply(h);
            if need_lin {
                out.edc_lin = Some(bands.iter().map(|b| schroeder_edc(b, EdcScale::Linear)).collect());
            }
            if need_db {
                out.edc_db = Some(bands.iter().map(|b| schroeder_edc(b, EdcScale::Db)).collect());
            }
        }
        Ok(out)
    }

    fn stft_only(h: &[f64], cfg: &MssConfig) -> Result<Self> {
        let stft = cfg
            .resolutions
            .iter()
            .map(|&(w, hop)| {
                let mags = magnitudes(h, w, hop)?;
                let norm = frobenius(mags.iter().copied());
                if !(norm > 0.0) {
                    return Err(invalid("spectral convergence needs a non-zero target"));
                }
                Ok((mags, frame_count(h.len(), hop), norm))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            len: h.len(),
            stft,
            edc_lin: None,
            edc_db: None,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn stft_terms(&self, model: &[f64], cfg: &MssConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut sc = Vec::new();
        let mut sm = Vec::new();
        for ((mags, frames, _), &(w, hop)) in self.stft.iter().zip(&cfg.resolutions) {
            let m = magnitudes(model, w, hop)?;
            sc.push(sc_from_mags(mags, &m)?);
            sm.push(sm_from_mags(mags, &m, *frames));
        }
        Ok((sc, sm))
    }

    fn edc(&self, scale: EdcScale) -> Result<&[Vec<f64>]> {
        match scale {
            EdcScale::Linear => self.edc_lin.as_deref(),
            EdcScale::Db => self.edc_db.as_deref(),
        }
        .ok_or_else(|| invalid("target features were prepared without this EDC scale"))
    }

    fn check(&self, kind: LossKind, model: &[f64]) -> Result<()> {
        if model.len() != self.len {
            return Err(invalid(format!(
                "model length {} differs from target length {}",
                model.len(),
                self.len
            )));
        }
        if kind.uses_stft() && self.stft.is_empty() {
            return Err(invalid("target features were prepared without STFTs"));
        }
        Ok(())
    }

    /// Loss of `model` against the cached target.
    pub fn evaluate(&self, kind: LossKind, model: &[f64], ctx: &LossContext) -> Result<LossValue> {
        self.check(kind, model)?;
        if let Some(scale) = kind.edc_scale() {
            let target = self.edc(scale)?;
            let m: Vec<Vec<f64>> = ctx.bank.apply(model).iter().map(|b| schroeder_edc(b, scale)).collect();
            return edc_distance(target, &m, ctx.bank.centers());
        }
        let (sc, sm) = self.stft_terms(model, &ctx.mss)?;
        Ok(combine_stft(kind, &sc, &sm, &ctx.mss))
    }

    /// Several losses of one model, sharing the model-side analysis.
    pub fn evaluate_many(&self, kinds: &[LossKind], model: &[f64], ctx: &LossContext) -> Result<Vec<LossValue>> {
        let stft_terms = if kinds.iter().any(|k| k.uses_stft()) {
            self.check(LossKind::Mss, model)?;
            Some(self.stft_terms(model, &ctx.mss)?)
        } else {
            None
        };
        let bands = kinds
            .iter()
            .any(|k| k.edc_scale().is_some())
            .then(|| ctx.bank.apply(model));
        kinds
            .iter()
            .map(|&kind| {
                self.check(kind, model)?;
                match (kind.edc_scale(), &stft_terms, &bands) {
                    (Some(scale), _, Some(bands)) => {
                        let m: Vec<Vec<f64>> = bands.iter().map(|b| schroeder_edc(b, scale)).collect();
                        edc_distance(self.edc(scale)?, &m, ctx.bank.centers())
                    }
                    (None, Some((sc, sm)), _) => Ok(combine_stft(kind, sc, sm, &ctx.mss)),
                    _ => unreachable!("analysis prepared for every requested kind"),
                }
            })
            .collect()
    }

    /// Loss value and its gradient with respect to the model signal.
    pub(crate) fn value_and_grad(
        &self,
        kind: LossKind,
        model: &[f64],
        ctx: &LossContext,
    ) -> Result<(LossValue, Vec<f64>)> {
        self.check(kind, model)?;
        match kind.edc_scale() {
            Some(scale) => self.edc_value_and_grad(scale, model, ctx),
            None => self.stft_value_and_grad(kind, model, ctx),
        }
    }

    fn edc_value_and_grad(&self, scale: EdcScale, model: &[f64], ctx: &LossContext) -> Result<(LossValue, Vec<f64>)> {
        let target = self.edc(scale)?;
        let bands = ctx.bank.apply(model);
        let lin: Vec<Vec<f64>> = bands.iter().map(|b| schroeder_edc(b, EdcScale::Linear)).collect();
        let curves: Vec<Vec<f64>> = match scale {
            EdcScale::Linear => lin.clone(),
            EdcScale::Db => lin.iter().map(|c| c.iter().map(|&v| to_db(v)).collect()).collect(),
        };
        let value = edc_distance(target, &curves, ctx.bank.centers())?;
        let denom: f64 = target.iter().flatten().map(|v| v * v).sum();

        let band_grads: Vec<Vec<f64>> = bands
            .iter()
            .zip(&lin)
            .zip(curves.iter().zip(target))
            .map(|((y, e_lin), (e, t))| {
                // ∂L/∂ε(t), then through Schroeder: ∂L/∂y(τ) = 2 y(τ) Σ_{t ≤ τ} ∂L/∂ε(t)
                let mut acc = 0.0;
                y.iter()
                    .enumerate()
                    .map(|(tau, &yv)| {
                        let mut g = 2.0 * (e[tau] - t[tau]) / denom;
                        if scale == EdcScale::Db {
                            g = if e_lin[tau] > EDC_FLOOR_LINEAR {
                                g * 10.0 / (std::f64::consts::LN_10 * e_lin[tau])
                            } else {
                                0.0
                            };
                        }
                        acc += g;
                        2.0 * yv * acc
                    })
                    .collect()
            })
            .collect();
        Ok((value, ctx.bank.apply_adjoint(&band_grads)))
    }

    fn stft_value_and_grad(&self, kind: LossKind, model: &[f64], ctx: &LossContext) -> Result<(LossValue, Vec<f64>)> {
        let cfg = &ctx.mss;
        let r = cfg.resolutions.len() as f64;
        let mut grad = vec![0.0; model.len()];
        let mut sc_terms = Vec::new();
        let mut sm_terms = Vec::new();
        for ((target, frames, tnorm), &(w, hop)) in self.stft.iter().zip(&cfg.resolutions) {
            let (spec, _, _) = stft_complex(model, w, hop);
            let mags: Vec<f64> = spec.iter().map(|v| v.norm()).collect();
            let diff_norm = frobenius(target.iter().zip(&mags).map(|(a, b)| a - b));
            let sc = diff_norm / tnorm;
            let sm = sm_from_mags(target, &mags, *frames);
            sc_terms.push(sc);
            sm_terms.push(sm);

            let use_sc = kind != LossKind::Sm;
            let use_sm = kind != LossKind::Sc;
            let spec_grad: Vec<Complex64> = spec
                .iter()
                .zip(&mags)
                .zip(target)
                .map(|((x, &m), &a)| {
                    if !(m > 0.0) {
                        return Complex64::new(0.0, 0.0);
                    }
                    let mut g = 0.0;
                    if use_sc && diff_norm > 0.0 {
                        g += (m - a) / (diff_norm * tnorm);
                    }
                    if use_sm && m > LOG_CLAMP {
                        g += sign(clamped_log(m) - clamped_log(a)) / (*frames as f64 * m);
                    }
                    x * (g / (r * m))
                })
                .collect();
            for (o, v) in grad.iter_mut().zip(stft_backward(&spec_grad, model.len(), w, hop)) {
                *o += v;
            }
        }
        Ok((combine_stft(kind, &sc_terms, &sm_terms, cfg), grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decay(len: usize, seed: u64, tau: f64) -> Vec<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * (-(i as f64) / tau).exp()
            })
            .collect()
    }

    fn ctx() -> LossContext {
        LossContext::new(
            MssConfig::new(vec![(64, 32), (128, 64), (256, 128)]).unwrap(),
            OctaveFilterBank::new(&[250.0, 500.0, 1000.0, 2000.0], 8000.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn spectral_convergence_examples() {
        let h = decay(4000, 1, 800.0);
        assert_eq!(spectral_convergence(&h, &h, 256, 128).unwrap(), 0.0);
        let zero = vec![0.0; h.len()];
        assert!((spectral_convergence(&h, &zero, 256, 128).unwrap() - 1.0).abs() < 1e-12);
        let twice: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        assert!((spectral_convergence(&h, &twice, 256, 128).unwrap() - 1.0).abs() < 1e-12);
        assert!(spectral_convergence(&zero, &h, 256, 128).is_err());
        assert!(spectral_convergence(&h, &h[..100], 256, 128).is_err());
    }

    #[test]
    fn log_magnitude_examples() {
        let h = decay(4000, 2, 1e9);
        assert_eq!(spectral_log_magnitude(&h, &h, 256, 128).unwrap(), 0.0);
        let scaled: Vec<f64> = h.iter().map(|v| v * std::f64::consts::E).collect();
        // Uniform log offset of 1 in every bin: (1/S)·S·F = F.
        let v = spectral_log_magnitude(&h, &scaled, 256, 128).unwrap();
        assert!((v - 129.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn log_magnitude_matches_naive() {
        let h = decay(3000, 3, 500.0);
        let m = decay(3000, 4, 700.0);
        let a = crate::dsp::stft_magnitude(&h, 128, 64).unwrap();
        let b = crate::dsp::stft_magnitude(&m, 128, 64).unwrap();
        let mut naive = 0.0;
        for f in 0..a.frames {
            for k in 0..a.bins {
                naive += (a.get(f, k).max(1e-10).ln() - b.get(f, k).max(1e-10).ln()).abs();
            }
        }
        naive /= a.frames as f64;
        let v = spectral_log_magnitude(&h, &m, 128, 64).unwrap();
        assert!((v - naive).abs() < 1e-12 * naive);
    }

    #[test]
    fn mss_averages_resolutions() {
        let h = decay(4000, 5, 600.0);
        let m = decay(4000, 6, 900.0);
        let c = ctx();
        let zero = mss_loss(&h, &h, &c.mss).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(zero.components.values().all(|&v| v == 0.0));

        let single = MssConfig::new(vec![(128, 64)]).unwrap();
        let v = mss_loss(&h, &m, &single).unwrap().value;
        let expect = spectral_convergence(&h, &m, 128, 64).unwrap() + spectral_log_magnitude(&h, &m, 128, 64).unwrap();
        assert!((v - expect).abs() < 1e-12);

        let three = mss_loss(&h, &m, &c.mss).unwrap();
        let per: Vec<f64> = c
            .mss
            .resolutions
            .iter()
            .map(|&(w, hop)| {
                spectral_convergence(&h, &m, w, hop).unwrap() + spectral_log_magnitude(&h, &m, w, hop).unwrap()
            })
            .collect();
        assert!((three.value - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        let sum: f64 = three.components.values().sum();
        assert!((sum - three.value).abs() < 1e-12);
    }

    #[test]
    fn edc_loss_hand_example() {
        let bank = OctaveFilterBank::new(&[1000.0], 8000.0).unwrap();
        let v = edc_loss(&[1.0, 0.0], &[0.0, 1.0], &bank, EdcScale::Linear).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);
        let h = decay(2000, 7, 300.0);
        assert_eq!(edc_loss(&h, &h, &bank, EdcScale::Db).unwrap().value, 0.0);
        assert!(edc_loss(&[0.0; 4], &[1.0; 4], &bank, EdcScale::Linear).is_err());
    }

    /// Closed form on a decaying signal: doubling the model shifts every dB
    /// EDC value by 10·log10(4).
    #[test]
    fn edc_db_offset_closed_form() {
        let c = ctx();
        let h = decay(3000, 8, 400.0);
        let twice: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let target: Vec<Vec<f64>> = c
            .bank
            .apply(&h)
            .iter()
            .map(|b| schroeder_edc(b, EdcScale::Db))
            .collect();
        let offset = 10.0 * 4f64.log10();
        let n: f64 = target
            .iter()
            .flatten()
            .map(|&v| {
                if v > crate::dsp::EDC_FLOOR_DB + offset {
                    offset * offset
                } else {
                    0.0
                }
            })
            .sum();
        let d: f64 = target.iter().flatten().map(|v| v * v).sum();
        let v = edc_loss(&h, &twice, &c.bank, EdcScale::Db).unwrap().value;
        assert!((v - n / d).abs() < 1e-9 * (n / d), "{v} vs {}", n / d);
    }

    #[test]
    fn sparsity_examples() {
        assert!((sparsity_loss(&DMatrix::identity(4, 4)).unwrap() - 1.0).abs() < 1e-15);
        let hadamard = DMatrix::from_row_slice(
            4,
            4,
            &[1., 1., 1., 1., 1., -1., 1., -1., 1., 1., -1., -1., 1., -1., -1., 1.],
        ) / 2.0;
        assert!(sparsity_loss(&hadamard).unwrap().abs() < 1e-15);
        assert!(sparsity_loss(&DMatrix::identity(1, 1)).is_err());
        assert!(sparsity_loss(&DMatrix::zeros(2, 3)).is_err());
        let perm = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 0., 0., 1., 1., 0., 0.]);
        assert!((sparsity_loss(&perm).unwrap() - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sparsity_in_unit_interval(n in 2usize..9, seed in 0u64..1000) {
            let u = crate::linalg::random_orthogonal(n, seed).unwrap();
            let v = sparsity_loss(&u).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn distance_maps() {
        let h = decay(3000, 9, 500.0);
        let maps = stft_distance_maps(&h, &h, 256, 128).unwrap();
        assert!(maps.log_map.magnitudes.iter().all(|&v| v == 0.0));
        let twice: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let maps = stft_distance_maps(&h, &twice, 256, 128).unwrap();
        let mags = crate::dsp::stft_magnitude(&h, 256, 128).unwrap();
        for ((l, j2), m) in maps
            .log_map
            .magnitudes
            .iter()
            .zip(&maps.linear_map.magnitudes)
            .zip(&mags.magnitudes)
        {
            if *m > 1e-9 {
                assert!((l - 2f64.ln()).abs() < 1e-9);
            }
            assert!((j2 - m).abs() < 1e-12 * m.max(1.0));
        }
    }

    #[test]
    fn composite_bookkeeping() {
        let c = ctx();
        let h = decay(3000, 10, 500.0);
        let m = decay(3000, 11, 600.0);
        let u = crate::linalg::random_orthogonal(4, 1).unwrap();
        let primary = evaluate(LossKind::EdcLin, &h, &m, &c).unwrap().value;
        let none = composite_objective(&h, &m, &u, &ObjectiveSpec::new(LossKind::EdcLin, 0.0), &c).unwrap();
        assert_eq!(none.value, primary);
        let lu = sparsity_loss(&u).unwrap();
        let only_u = composite_objective(&h, &h, &u, &ObjectiveSpec::new(LossKind::EdcLin, 0.7), &c).unwrap();
        assert!((only_u.value - 0.7 * lu).abs() < 1e-15);
        let both = composite_objective(&h, &m, &u, &ObjectiveSpec::new(LossKind::Mss, 2.0), &c).unwrap();
        let sum: f64 = both.components.values().sum();
        assert!((sum - both.value).abs() <= 1e-12 * both.value);
    }

    #[test]
    fn scale_invariance_of_linear_edc_loss() {
        let c = ctx();
        let h = decay(3000, 12, 500.0);
        let m = decay(3000, 13, 650.0);
        let base = edc_loss(&h, &m, &c.bank, EdcScale::Linear).unwrap().value;
        let hs: Vec<f64> = h.iter().map(|v| v * 3.7).collect();
        let ms: Vec<f64> = m.iter().map(|v| v * 3.7).collect();
        let scaled = edc_loss(&hs, &ms, &c.bank, EdcScale::Linear).unwrap().value;
        assert!((base - scaled).abs() < 1e-9 * base, "{base} {scaled}");
    }

    #[test]
    fn db_edc_difference_is_scale_invariant() {
        let c = ctx();
        let h = decay(3000, 16, 500.0);
        let m = decay(3000, 17, 650.0);
        use crate::dsp::band_edcs;
        let sq_diff = |a: &[f64], b: &[f64]| -> f64 {
            let (ea, eb) = (band_edcs(a, &c.bank, EdcScale::Db), band_edcs(b, &c.bank, EdcScale::Db));
            ea.values
                .iter()
                .flatten()
                .zip(eb.values.iter().flatten())
                .map(|(x, y)| (x - y).powi(2))
                .sum()
        };
        let base = sq_diff(&h, &m);
        let hs: Vec<f64> = h.iter().map(|v| v * 0.2).collect();
        let ms: Vec<f64> = m.iter().map(|v| v * 0.2).collect();
        assert!((sq_diff(&hs, &ms) - base).abs() < 1e-8 * base);
    }

    #[test]
    fn many_matches_single() {
        let c = ctx();
        let h = decay(3000, 14, 500.0);
        let m = decay(3000, 15, 650.0);
        let f = TargetFeatures::new(&h, &c, &LossKind::ALL).unwrap();
        let many = f.evaluate_many(&LossKind::ALL, &m, &c).unwrap();
        for (k, v) in LossKind::ALL.iter().zip(&many) {
            assert_eq!(v, &evaluate(*k, &h, &m, &c).unwrap());
        }
    }
}
