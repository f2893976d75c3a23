//! Gradient-descent study: random targets, learnable FDN initialisation,
//! Adam with early stopping, and aggregation over trials.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attenuation::{AttenuationParams, MAX_CROSSOVER_RATIO};
use crate::dsp::{match_energy, noise_energy_for_snr, noise_with_energy, OctaveFilterBank};
use crate::error::{invalid, Result};
use crate::fdn::{make_frequency_grid, render_ir, sample_coprime_delays, FdnParams, FrequencyGrid, ImpulseResponse};
use crate::grad::{ModelNoise, Objective, ParamMask, ParamVector, Parameterization, Problem, RawGradient, RawParams};
use crate::linalg::{random_orthogonal, skew_exp};
use crate::losses::{LossContext, LossKind, MssConfig, ObjectiveSpec};
use crate::seeds::derive_seed;

/// Adam on a flat parameter vector with per-entry learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: Vec<f64>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = lr.len();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Updates `x` in place. Entries with learning rate 0 never move.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            if self.lr[i] == 0.0 {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.lr[i] * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// The four noise/trainability configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TestId {
    /// Noisy target, attenuation only.
    T1,
    /// Noisy target, all parameters.
    T2,
    /// Noise-aware, attenuation only.
    T3,
    /// Noise-aware, all parameters.
    T4,
}

impl TestId {
    pub const ALL: [TestId; 4] = [TestId::T1, TestId::T2, TestId::T3, TestId::T4];

    pub fn number(self) -> u8 {
        match self {
            TestId::T1 => 1,
            TestId::T2 => 2,
            TestId::T3 => 3,
            TestId::T4 => 4,
        }
    }

    pub fn noise_aware(self) -> bool {
        matches!(self, TestId::T3 | TestId::T4)
    }

    pub fn mask(self) -> ParamMask {
        match self {
            TestId::T1 | TestId::T3 => ParamMask::attenuation_only(),
            TestId::T2 | TestId::T4 => ParamMask::all(),
        }
    }
}

impl TryFrom<u8> for TestId {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(TestId::T1),
            2 => Ok(TestId::T2),
            3 => Ok(TestId::T3),
            4 => Ok(TestId::T4),
            _ => Err(format!("test id must be 1..=4, got {v}")),
        }
    }
}

impl From<TestId> for u8 {
    fn from(t: TestId) -> u8 {
        t.number()
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Uniform priors of the target attenuation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub t60: (f64, f64),
    pub crossover_hz: (f64, f64),
}

impl Priors {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let (t0, t1) = self.t60;
        let (f0, f1) = self.crossover_hz;
        if !(t0 > 0.0 && t1 >= t0) {
            return Err(invalid("T60 prior must be a positive, ordered interval"));
        }
        if !(f0 > crate::grad::CROSSOVER_FLOOR_HZ && f1 >= f0 && f1 < MAX_CROSSOVER_RATIO * sample_rate) {
            return Err(invalid(format!(
                "crossover prior must lie inside ({}, {}) Hz",
                crate::grad::CROSSOVER_FLOOR_HZ,
                MAX_CROSSOVER_RATIO * sample_rate
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, t60_nyquist: f64) -> AttenuationParams {
        AttenuationParams::new(
            rng.gen_range(self.t60.0..=self.t60.1),
            rng.gen_range(self.crossover_hz.0..=self.crossover_hz.1),
            t60_nyquist,
        )
    }

    pub fn contains(&self, a: &AttenuationParams) -> bool {
        (self.t60.0..=self.t60.1).contains(&a.t60_dc)
            && (self.crossover_hz.0..=self.crossover_hz.1).contains(&a.crossover_hz)
    }
}

/// Optimiser and stopping settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Learning rate of the raw attenuation parameters.
    pub lr_attenuation: f64,
    /// Learning rate of the raw frequency-independent parameters.
    pub lr_frequency_independent: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iterations: usize,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.epochs == 0 {
            return Err(invalid("iterations and epochs must be positive"));
        }
        if self.max_iterations % self.epochs != 0 {
            return Err(invalid("max_iterations must be a multiple of epochs"));
        }
        if self.patience > self.epochs {
            return Err(invalid("patience cannot exceed the number of epochs"));
        }
        if !(self.lr_attenuation >= 0.0 && self.lr_frequency_independent >= 0.0) {
            return Err(invalid("learning rates must be non-negative"));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.max_iterations / self.epochs
    }
}

/// Everything that defines one optimisation trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial_id: usize,
    pub seed: u64,
    pub test_id: TestId,
    pub loss: LossKind,
    pub sample_rate: f64,
    pub num_bins: usize,
    pub priors: Priors,
    pub t60_nyquist: f64,
    pub snr_db: f64,
    pub target_size: usize,
    pub model_size: usize,
    /// Delay range of both FDNs in seconds.
    pub delay_range: (f64, f64),
    pub sparsity_weight: f64,
    pub mss: MssConfig,
    pub optimizer: OptimizerConfig,
    /// Draw a new model noise sequence every iteration instead of once per trial.
    pub redraw_noise: bool,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.priors.validate(self.sample_rate)?;
        self.optimizer.validate()?;
        self.mss.validate()?;
        if self.target_size < 2 || self.model_size < 2 {
            return Err(invalid("FDN sizes must be at least 2"));
        }
        if !(self.delay_range.0 > 0.0 && self.delay_range.1 > self.delay_range.0) {
            return Err(invalid("delay range must be positive and ordered"));
        }
        if self.sparsity_weight < 0.0 {
            return Err(invalid("sparsity weight must be non-negative"));
        }
        Ok(())
    }

    fn delay_samples(&self) -> (usize, usize) {
        (
            (self.delay_range.0 * self.sample_rate).round() as usize,
            (self.delay_range.1 * self.sample_rate).round() as usize,
        )
    }
}

/// Noisy target response of a trial.
#[derive(Debug, Clone)]
pub struct SynthesizedTarget {
    pub fdn: FdnParams,
    pub attenuation: AttenuationParams,
    pub clean: ImpulseResponse,
    pub noisy: ImpulseResponse,
    pub noise_energy: f64,
}

fn alternating(n: usize) -> Vec<f64> {
    (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

/// Builds the target FDN (random `U`, `c = 1`, alternating `b`), samples its
/// attenuation from the priors and adds white noise at `cfg.snr_db`.
pub fn synthesize_target(cfg: &TrialConfig, grid: &FrequencyGrid) -> Result<SynthesizedTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let (lo, hi) = cfg.delay_samples();
    let n = cfg.target_size;
    let fdn = FdnParams::new(
        sample_coprime_delays(n, lo, hi, &mut rng)?,
        random_orthogonal(n, derive_seed(cfg.seed, 2))?,
        alternating(n),
        vec![1.0; n],
        cfg.sample_rate,
    )?;
    let attenuation = cfg.priors.sample(&mut rng, cfg.t60_nyquist);
    let clean = render_ir(&fdn, &attenuation, grid)?;
    let noise_energy = noise_energy_for_snr(clean.energy(), cfg.snr_db);
    let w1 = noise_with_energy(clean.len(), noise_energy, derive_seed(cfg.seed, 3))?;
    let noisy = ImpulseResponse::new(
        clean.samples.iter().zip(&w1).map(|(a, b)| a + b).collect(),
        cfg.sample_rate,
    )?;
    Ok(SynthesizedTarget {
        fdn,
        attenuation,
        clean,
        noisy,
        noise_energy,
    })
}

/// Initial learnable FDN and its raw parameters.
#[derive(Debug, Clone)]
pub struct LearnableInit {
    pub fdn: FdnParams,
    pub params: ParamVector,
    pub raw: RawParams,
    pub parameterization: Parameterization,
}

/// Samples the model's frequency-independent parameters, energy-matches it
/// to `target_energy` at `target`, and draws a random starting attenuation.
pub fn init_learnable(
    cfg: &TrialConfig,
    target_energy: f64,
    target: &AttenuationParams,
    grid: &FrequencyGrid,
) -> Result<LearnableInit> {
    if !(target_energy > 0.0) {
        return Err(invalid("target energy must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 10));
    let n = cfg.model_size;
    let (lo, hi) = cfg.delay_samples();
    let delays = sample_coprime_delays(n, lo, hi, &mut rng)?;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let generator = DMatrix::from_fn(n, n, |_, _| normal(&mut rng));
    let b: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let c: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let fdn = FdnParams::new(delays.clone(), skew_exp(&generator), b, c, cfg.sample_rate)?;
    let fdn = match_energy(&fdn, target, target_energy, grid)?;

    let parameterization = Parameterization {
        delays,
        sample_rate: cfg.sample_rate,
        t60_nyquist: cfg.t60_nyquist,
        mask: cfg.test_id.mask(),
    };
    let start = cfg.priors.sample(&mut rng, cfg.t60_nyquist);
    let raw = RawParams {
        t60: Parameterization::raw_t60(start.t60_dc),
        crossover: parameterization.raw_crossover(start.crossover_hz)?,
        generator,
        input_gains: fdn.input_gains().to_vec(),
        output_gains: fdn.output_gains().to_vec(),
    };
    let params = parameterization.reparameterize(&raw);
    Ok(LearnableInit {
        fdn,
        params,
        raw,
        parameterization,
    })
}

fn flatten(raw: &RawParams) -> Vec<f64> {
    let mut v = vec![raw.t60, raw.crossover];
    v.extend(raw.generator.iter());
    v.extend(&raw.input_gains);
    v.extend(&raw.output_gains);
    v
}

fn flatten_grad(g: &RawGradient) -> Vec<f64> {
    let mut v = vec![g.t60, g.crossover];
    v.extend(g.generator.iter());
    v.extend(&g.input_gains);
    v.extend(&g.output_gains);
    v
}

fn unflatten(v: &[f64], n: usize) -> RawParams {
    RawParams {
        t60: v[0],
        crossover: v[1],
        generator: DMatrix::from_column_slice(n, n, &v[2..2 + n * n]),
        input_gains: v[2 + n * n..2 + n * n + n].to_vec(),
        output_gains: v[2 + n * n + n..].to_vec(),
    }
}

fn learning_rates(n: usize, mask: &ParamMask, opt: &OptimizerConfig) -> Vec<f64> {
    let fi = opt.lr_frequency_independent;
    let on = |flag: bool, lr: f64| if flag { lr } else { 0.0 };
    let mut lr = vec![
        on(mask.t60_dc, opt.lr_attenuation),
        on(mask.crossover, opt.lr_attenuation),
    ];
    lr.extend(std::iter::repeat(on(mask.feedback, fi)).take(n * n));
    lr.extend(std::iter::repeat(on(mask.input_gains, fi)).take(n));
    lr.extend(std::iter::repeat(on(mask.output_gains, fi)).take(n));
    lr
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: TrialConfig,
    pub target: AttenuationParams,
    pub initial: AttenuationParams,
    pub estimate: AttenuationParams,
    /// Epoch-mean objective per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    pub iterations_run: usize,
    /// `|estimate − target| / target` for T60 and crossover.
    pub rel_error_t60: f64,
    pub rel_error_crossover: f64,
    /// Whether masked frequency-independent parameters came back bit-identical.
    pub frozen_parameters_intact: bool,
    pub failure: Option<String>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Early stopping on the epoch-mean objective.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch value; returns `true` when training should stop.
    pub fn update(&mut self, value: f64) -> bool {
        if value < self.best - self.min_delta {
            self.best = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

fn relative_error(estimate: f64, target: f64) -> f64 {
    (estimate - target).abs() / target
}

/// Runs Adam on the configured objective. Numeric failures are recorded,
/// not propagated; configuration errors are returned.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialRecord> {
    cfg.validate()?;
    let start_time = Instant::now();
    let grid = make_frequency_grid(cfg.num_bins)?;
    let target = synthesize_target(cfg, &grid)?;
    let init = init_learnable(cfg, target.clean.energy(), &target.attenuation, &grid)?;
    let n = cfg.model_size;

    let noise_seed = derive_seed(cfg.seed, 20);
    let objective = Objective {
        spec: ObjectiveSpec::new(cfg.loss, cfg.sparsity_weight),
        ctx: LossContext::new(cfg.mss.clone(), OctaveFilterBank::octaves(cfg.sample_rate)?)?,
        model_noise: cfg.test_id.noise_aware().then_some(ModelNoise {
            energy: target.noise_energy,
            seed: noise_seed,
        }),
        t_mix: 0.0,
    };
    let mut problem = Problem::new(&init.params.delays, grid, &target.noisy, objective)?;

    let opt = &cfg.optimizer;
    let mut adam = Adam::new(
        learning_rates(n, &init.parameterization.mask, opt),
        opt.beta1,
        opt.beta2,
        opt.eps,
    );
    let mut x = flatten(&init.raw);
    let mut stopper = EarlyStopping::new(opt.patience, opt.min_delta);
    let mut epoch_losses = Vec::new();
    let mut iterations = 0;
    let mut failure = None;

    'epochs: for _ in 0..opt.epochs {
        let mut sum = 0.0;
        for _ in 0..opt.iterations_per_epoch() {
            if cfg.redraw_noise && cfg.test_id.noise_aware() {
                problem.set_model_noise(ModelNoise {
                    energy: target.noise_energy,
                    seed: derive_seed(noise_seed, iterations as u64 + 1),
                })?;
            }
            let raw = unflatten(&x, n);
            let params = init.parameterization.reparameterize(&raw);
            match problem.loss_and_gradient(&params) {
                Ok((value, grad)) => {
                    sum += value.value;
                    let g = flatten_grad(&init.parameterization.pullback(&raw, &grad));
                    adam.step(&mut x, &g);
                    iterations += 1;
                }
                Err(e) if e.is_numeric() => {
                    failure = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        epoch_losses.push(sum / opt.iterations_per_epoch() as f64);
        if stopper.update(*epoch_losses.last().expect("just pushed")) {
            break;
        }
    }
    if failure.is_none() && x.iter().any(|v| !v.is_finite()) {
        failure = Some("parameters diverged".into());
    }

    let final_raw = unflatten(&x, n);
    let estimate = init.parameterization.reparameterize(&final_raw).attenuation();
    let frozen_parameters_intact = init.parameterization.mask.trains_frequency_independent()
        || (final_raw.generator == init.raw.generator
            && final_raw.input_gains == init.raw.input_gains
            && final_raw.output_gains == init.raw.output_gains);
    Ok(TrialRecord {
        config: cfg.clone(),
        target: target.attenuation,
        initial: init.params.attenuation(),
        estimate,
        epochs_run: epoch_losses.len(),
        epoch_losses,
        iterations_run: iterations,
        rel_error_t60: relative_error(estimate.t60_dc, target.attenuation.t60_dc),
        rel_error_crossover: relative_error(estimate.crossover_hz, target.attenuation.crossover_hz),
        frozen_parameters_intact,
        failure,
        wall_time: start_time.elapsed(),
    })
}

/// A study: `J` trials for every (test, loss) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Template; `trial_id`, `seed`, `test_id` and `loss` are overwritten.
    pub base: TrialConfig,
    pub trials: usize,
    pub tests: Vec<TestId>,
    pub losses: Vec<LossKind>,
    pub base_seed: u64,
}

/// Aggregate of one (test, loss) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub test_id: TestId,
    pub loss: LossKind,
    pub trials: usize,
    pub failures: usize,
    pub mae_t60_percent: f64,
    pub mae_crossover_percent: f64,
    pub mean_epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub cells: Vec<CellReport>,
    pub records: Vec<TrialRecord>,
}

impl StudyReport {
    pub fn cell(&self, test: TestId, loss: LossKind) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.test_id == test && c.loss == loss)
    }

    /// One row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("test,loss,mae_t60_percent,mae_crossover_percent,mean_epochs,trials,failures\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.test_id, c.loss, c.mae_t60_percent, c.mae_crossover_percent, c.mean_epochs, c.trials, c.failures
            ));
        }
        out
    }

    /// One row per test, two MAE columns per loss.
    pub fn table_csv(&self) -> String {
        let mut tests: Vec<TestId> = self.cells.iter().map(|c| c.test_id).collect();
        tests.dedup();
        let mut losses: Vec<LossKind> = self.cells.iter().map(|c| c.loss).collect();
        losses.sort();
        losses.dedup();
        let mut out = String::from("test");
        for l in &losses {
            out.push_str(&format!(",{l}_t60_mae_percent,{l}_crossover_mae_percent"));
        }
        out.push('\n');
        for t in tests {
            out.push_str(&t.to_string());
            for &l in &losses {
                match self.cell(t, l) {
                    Some(c) => out.push_str(&format!(",{},{}", c.mae_t60_percent, c.mae_crossover_percent)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Per-trial epoch trajectories in long format.
    pub fn trajectories_csv(&self) -> String {
        let mut out = String::from("test,loss,trial,epoch,objective\n");
        for r in &self.records {
            for (e, v) in r.epoch_losses.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.config.test_id, r.config.loss, r.config.trial_id, e, v
                ));
            }
        }
        out
    }
}

fn aggregate(test_id: TestId, loss: LossKind, records: &[&TrialRecord]) -> CellReport {
    let ok: Vec<&&TrialRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let mean = |f: &dyn Fn(&TrialRecord) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    CellReport {
        test_id,
        loss,
        trials: records.len(),
        failures: records.len() - ok.len(),
        mae_t60_percent: 100.0 * mean(&|r| r.rel_error_t60),
        mae_crossover_percent: 100.0 * mean(&|r| r.rel_error_crossover),
        mean_epochs: mean(&|r| r.epochs_run as f64),
    }
}

/// Trial `j` uses the same target in every cell.
pub fn trial_config(study: &StudyConfig, test: TestId, loss: LossKind, j: usize) -> TrialConfig {
    TrialConfig {
        trial_id: j,
        seed: derive_seed(study.base_seed, j as u64),
        test_id: test,
        loss,
        ..study.base.clone()
    }
}

pub fn run_study(study: &StudyConfig) -> Result<StudyReport> {
    if study.trials == 0 {
        return Err(invalid("a study needs at least one trial"));
    }
    if study.tests.is_empty() || study.losses.is_empty() {
        return Err(invalid("a study needs at least one test and one loss"));
    }
    study.base.validate()?;
    let mut configs = Vec::new();
    for &test in &study.tests {
        for &loss in &study.losses {
            for j in 0..study.trials {
                configs.push(trial_config(study, test, loss, j));
            }
        }
    }
    let records: Vec<TrialRecord> = configs.par_iter().map(run_trial).collect::<Result<_>>()?;
    let mut grouped: BTreeMap<(TestId, LossKind), Vec<&TrialRecord>> = BTreeMap::new();
    for r in &records {
        grouped.entry((r.config.test_id, r.config.loss)).or_default().push(r);
    }
    let cells = study
        .tests
        .iter()
        .flat_map(|&t| study.losses.iter().map(move |&l| (t, l)))
        .map(|(t, l)| aggregate(t, l, &grouped[&(t, l)]))
        .collect();
    Ok(StudyReport { cells, records })
}
