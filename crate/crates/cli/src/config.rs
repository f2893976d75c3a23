//! Run configuration: preset defaults, overlaid by a TOML file, overlaid by
//! command-line flags. The resolved result is written next to the outputs.

use std::path::{Path, PathBuf};

use fdnopt::attenuation::AttenuationParams;
use fdnopt::harness::{OptimizerConfig, TestId};
use fdnopt::landscape::{NoiseCondition, PerturbedParameter};
use fdnopt::losses::LossKind;
use fdnopt::presets::{self, Preset, MIXING_TIME_S};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    T60,
    Crossover,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub attenuation: AttenuationParams,
    pub delays: Vec<usize>,
    pub num_bins: usize,
    /// Adds white noise at this SNR when set.
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    pub sweep: Sweep,
    pub steps: usize,
    pub noise: NoiseCondition,
    pub t_mix: f64,
    pub losses: Vec<LossKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub parameters: Vec<PerturbedParameter>,
    pub instances: usize,
    pub steps: usize,
    pub noise: NoiseCondition,
    pub losses: Vec<LossKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySettings {
    pub trials: usize,
    pub tests: Vec<TestId>,
    pub losses: Vec<LossKind>,
    pub num_bins: usize,
    pub snr_db: f64,
    pub sparsity_weight: f64,
    pub redraw_noise: bool,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub num_bins: usize,
    pub rel_step: f64,
    pub tolerance: f64,
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub render: RenderConfig,
    pub landscape: LandscapeConfig,
    pub perturb: PerturbConfig,
    pub study: StudySettings,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        let template = preset.trial_template();
        RunConfig {
            preset,
            seed: presets::DEFAULT_SEED,
            out: PathBuf::from("out"),
            render: RenderConfig {
                attenuation: preset.landscape_target(),
                delays: preset.model_delays(),
                num_bins: preset.landscape_bins(),
                snr_db: None,
            },
            landscape: LandscapeConfig {
                sweep: Sweep::Both,
                steps: preset.landscape_steps(),
                noise: NoiseCondition::None,
                t_mix: 0.0,
                losses: LossKind::ALL.to_vec(),
            },
            perturb: PerturbConfig {
                parameters: PerturbedParameter::ALL.to_vec(),
                instances: preset.perturbation_instances(),
                steps: preset.perturbation_steps(),
                noise: NoiseCondition::NoiseAware { snr_db: 10.0 },
                losses: presets::STUDY_LOSSES.to_vec(),
            },
            study: StudySettings {
                trials: preset.study_trials(),
                tests: TestId::ALL.to_vec(),
                losses: presets::STUDY_LOSSES.to_vec(),
                num_bins: template.num_bins,
                snr_db: template.snr_db,
                sparsity_weight: template.sparsity_weight,
                redraw_noise: template.redraw_noise,
                optimizer: template.optimizer,
            },
            gradcheck: GradcheckConfig {
                num_bins: 4096,
                rel_step: 1e-4,
                tolerance: 1e-4,
            },
        }
    }

    /// Preset defaults overlaid by `file` (a TOML document). The preset is
    /// taken from `preset_flag`, else from the file, else desk scale.
    pub fn resolve(file: Option<&Path>, preset_flag: Option<Preset>) -> Result<Self, CliError> {
        let overlay = match file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match (preset_flag, overlay.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => {
                let name = v
                    .as_str()
                    .ok_or_else(|| CliError::Config("preset must be a string".into()))?;
                name.parse()
                    .map_err(|e: fdnopt::Error| CliError::Config(e.to_string()))?
            }
            (None, None) => Preset::Desk,
        };
        let mut base = toml::Table::try_from(Self::defaults(preset)).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut base, overlay);
        base.insert("preset".into(), toml::Value::String(preset.name().into()));
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Recursive overlay; tables merge key by key, everything else replaces.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Noise condition from the `--noise` and `--snr-db` flags.
pub fn noise_condition(kind: &str, snr_db: f64) -> Result<NoiseCondition, CliError> {
    match kind {
        "none" => Ok(NoiseCondition::None),
        "target-only" => Ok(NoiseCondition::TargetOnly { snr_db }),
        "noise-aware" => Ok(NoiseCondition::NoiseAware { snr_db }),
        other => Err(CliError::Config(format!(
            "unknown noise condition '{other}' (expected none, target-only or noise-aware)"
        ))),
    }
}

/// Mixing time used by `--truncate`.
pub const DEFAULT_MIXING_TIME_S: f64 = MIXING_TIME_S;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for p in Preset::ALL {
            let cfg = RunConfig::defaults(p);
            let text = cfg.to_toml().unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.toml");
            std::fs::write(&path, text).unwrap();
            assert_eq!(RunConfig::resolve(Some(&path), None).unwrap(), cfg);
        }
    }

    #[test]
    fn file_overrides_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "preset = \"ci\"\nseed = 9\n[landscape]\nsteps = 11\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), None).unwrap();
        assert_eq!(cfg.preset, Preset::Ci);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.landscape.steps, 11);
        assert_eq!(cfg.perturb, RunConfig::defaults(Preset::Ci).perturb);

        std::fs::write(&path, "[landscape]\nstep = 11\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&path), None),
            Err(CliError::Config(_))
        ));
        std::fs::write(&path, "colour = 1\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&path), None),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn flag_preset_wins_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "preset = \"ci\"\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), Some(Preset::Paper)).unwrap();
        assert_eq!(cfg.preset, Preset::Paper);
        assert_eq!(cfg.render.num_bins, Preset::Paper.landscape_bins());
    }

    #[test]
    fn noise_flags() {
        assert_eq!(noise_condition("none", 3.0).unwrap(), NoiseCondition::None);
        assert_eq!(
            noise_condition("noise-aware", 10.0).unwrap(),
            NoiseCondition::NoiseAware { snr_db: 10.0 }
        );
        assert!(noise_condition("loud", 1.0).is_err());
    }
}
