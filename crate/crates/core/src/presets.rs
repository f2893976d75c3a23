//! Named experiment scales and the scenes and sweeps built from them.
//!
//! `paper-scale` runs at 48 kHz. The desk and CI scales run at 16 kHz with
//! every delay and crossover frequency scaled by `fs / 48000`, so that the
//! settings keep their meaning relative to Nyquist.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attenuation::{AttenuationParams, DEFAULT_T60_NYQUIST};
use crate::dsp::OctaveFilterBank;
use crate::error::{invalid, Error, Result};
use crate::fdn::{make_frequency_grid, sample_coprime_delays, FdnParams};
use crate::harness::{OptimizerConfig, Priors, StudyConfig, TestId, TrialConfig};
use crate::landscape::{LandscapeScene, NoiseCondition, ProfileSpec, Spacing};
use crate::linalg::random_orthogonal;
use crate::losses::{LossContext, LossKind, MssConfig};
use crate::seeds::derive_seed;

/// Delay lengths of the six-line model at 48 kHz.
pub const MODEL_DELAYS_48K: [usize; 6] = [997, 1153, 1327, 1559, 1801, 2099];
/// Same lengths scaled to 16 kHz and nudged to stay pairwise co-prime.
pub const MODEL_DELAYS_16K: [usize; 6] = [331, 383, 443, 521, 601, 701];
/// Delay range of the target FDN and of the study model, in seconds.
pub const DELAY_RANGE_S: (f64, f64) = (0.015, 0.045);
pub const TARGET_SIZE: usize = 32;
pub const MODEL_SIZE: usize = 6;
/// End states of the T60 sweep in seconds.
pub const T60_SWEEP: (f64, f64) = (0.25, 3.75);
/// End states of the crossover sweep at 48 kHz.
pub const CROSSOVER_SWEEP_48K: (f64, f64) = (1600.0, 16000.0);
/// Mixing time of the truncation variant.
pub const MIXING_TIME_S: f64 = 0.0875;
pub const DEFAULT_SEED: u64 = 0;

/// Losses compared throughout the experiments.
pub const STUDY_LOSSES: [LossKind; 3] = [LossKind::EdcLin, LossKind::EdcLog, LossKind::Mss];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "paper-scale")]
    Paper,
    #[serde(rename = "desk-scale")]
    Desk,
    #[serde(rename = "ci")]
    Ci,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Paper, Preset::Desk, Preset::Ci];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper-scale",
            Preset::Desk => "desk-scale",
            Preset::Ci => "ci",
        }
    }

    pub fn sample_rate(self) -> f64 {
        match self {
            Preset::Paper => 48000.0,
            Preset::Desk | Preset::Ci => 16000.0,
        }
    }

    /// `fs / 48000`.
    pub fn frequency_scale(self) -> f64 {
        self.sample_rate() / 48000.0
    }

    /// Bins of the landscape and perturbation analyses (4 s, 4 s, 2 s).
    pub fn landscape_bins(self) -> usize {
        match self {
            Preset::Paper => 96001,
            Preset::Desk => 32001,
            Preset::Ci => 16001,
        }
    }

    pub fn landscape_steps(self) -> usize {
        match self {
            Preset::Paper => 1000,
            Preset::Desk => 200,
            Preset::Ci => 50,
        }
    }

    pub fn perturbation_steps(self) -> usize {
        match self {
            Preset::Paper => 200,
            Preset::Desk => 100,
            Preset::Ci => 50,
        }
    }

    pub fn perturbation_instances(self) -> usize {
        match self {
            Preset::Paper => 50,
            Preset::Desk => 16,
            Preset::Ci => 8,
        }
    }

    pub fn model_delays(self) -> Vec<usize> {
        match self {
            Preset::Paper => MODEL_DELAYS_48K.to_vec(),
            Preset::Desk | Preset::Ci => MODEL_DELAYS_16K.to_vec(),
        }
    }

    /// Target of the landscape analyses: 2 s at dc, 10 kHz crossover at 48 kHz.
    pub fn landscape_target(self) -> AttenuationParams {
        AttenuationParams::new(2.0, 10000.0 * self.frequency_scale(), DEFAULT_T60_NYQUIST)
    }

    pub fn crossover_sweep(self) -> (f64, f64) {
        let s = self.frequency_scale();
        (CROSSOVER_SWEEP_48K.0 * s, CROSSOVER_SWEEP_48K.1 * s)
    }

    pub fn loss_context(self) -> Result<LossContext> {
        LossContext::new(MssConfig::default(), OctaveFilterBank::octaves(self.sample_rate())?)
    }

    /// Study priors. The crossover prior is capped just below the largest
    /// crossover the shelving design accepts.
    pub fn priors(self) -> Priors {
        let s = self.frequency_scale();
        let cap = 0.244 * self.sample_rate();
        Priors {
            t60: (1.0, 3.5),
            crossover_hz: (6000.0 * s, (12000.0 * s).min(cap)),
        }
    }

    /// Template trial of the gradient-descent study.
    pub fn trial_template(self) -> TrialConfig {
        let (num_bins, max_iterations) = match self {
            Preset::Paper => (108001, 8000),
            Preset::Desk => (12001, 320),
            Preset::Ci => (8001, 40),
        };
        TrialConfig {
            trial_id: 0,
            seed: 0,
            test_id: TestId::T1,
            loss: LossKind::EdcLog,
            sample_rate: self.sample_rate(),
            num_bins,
            priors: self.priors(),
            t60_nyquist: DEFAULT_T60_NYQUIST,
            snr_db: 10.0,
            target_size: TARGET_SIZE,
            model_size: MODEL_SIZE,
            delay_range: DELAY_RANGE_S,
            sparsity_weight: 1.0,
            mss: MssConfig::default(),
            optimizer: OptimizerConfig {
                lr_attenuation: 1e-2,
                lr_frequency_independent: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                max_iterations,
                epochs: 40,
                patience: 10,
                min_delta: 1e-4,
            },
            redraw_noise: false,
        }
    }

    pub fn study_trials(self) -> usize {
        match self {
            Preset::Paper => 80,
            Preset::Desk => 10,
            Preset::Ci => 2,
        }
    }

    pub fn study(self, seed: u64) -> StudyConfig {
        StudyConfig {
            base: self.trial_template(),
            trials: self.study_trials(),
            tests: TestId::ALL.to_vec(),
            losses: STUDY_LOSSES.to_vec(),
            base_seed: derive_seed(seed, 3),
        }
    }

    /// Target FDN (32 lines, alternating `b`, unit `c`) and the energy-matched
    /// six-line model, both with random orthogonal feedback.
    pub fn landscape_scene(self, seed: u64) -> Result<LandscapeScene> {
        let fs = self.sample_rate();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let lo = (DELAY_RANGE_S.0 * fs).round() as usize;
        let hi = (DELAY_RANGE_S.1 * fs).round() as usize;
        let target_fdn = FdnParams::new(
            sample_coprime_delays(TARGET_SIZE, lo, hi, &mut rng)?,
            random_orthogonal(TARGET_SIZE, derive_seed(seed, 2))?,
            alternating(TARGET_SIZE),
            vec![1.0; TARGET_SIZE],
            fs,
        )?;
        let delays = self.model_delays();
        let n = delays.len();
        let model = FdnParams::new(
            delays,
            random_orthogonal(n, derive_seed(seed, 4))?,
            alternating(n),
            vec![1.0; n],
            fs,
        )?;
        LandscapeScene::new(
            target_fdn,
            model,
            &self.landscape_target(),
            make_frequency_grid(self.landscape_bins())?,
            self.loss_context()?,
        )
    }

    /// Sweep over T60 at dc with the crossover held at its target.
    pub fn t60_sweep(self, num_steps: usize, noise: NoiseCondition, t_mix: f64, seed: u64) -> ProfileSpec {
        let target = self.landscape_target();
        ProfileSpec {
            theta_start: AttenuationParams {
                t60_dc: T60_SWEEP.0,
                ..target
            },
            theta_end: AttenuationParams {
                t60_dc: T60_SWEEP.1,
                ..target
            },
            num_steps,
            spacing: Spacing::Linear,
            target,
            noise,
            t_mix,
            seed: derive_seed(seed, 5),
        }
    }

    /// Log-spaced sweep over the crossover with T60 held at its target.
    pub fn crossover_sweep_spec(self, num_steps: usize, noise: NoiseCondition, t_mix: f64, seed: u64) -> ProfileSpec {
        let target = self.landscape_target();
        let (lo, hi) = self.crossover_sweep();
        ProfileSpec {
            theta_start: AttenuationParams {
                crossover_hz: lo,
                ..target
            },
            theta_end: AttenuationParams {
                crossover_hz: hi,
                ..target
            },
            num_steps,
            spacing: Spacing::Log,
            target,
            noise,
            t_mix,
            seed: derive_seed(seed, 6),
        }
    }
}

fn alternating(n: usize) -> Vec<f64> {
    (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid(format!("unknown preset '{s}' (expected paper-scale, desk-scale or ci)")))
    }
}
