//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use diffinfo::diffusion::DiffusionSchedule;
use diffinfo::nn::{AdamConfig, NetworkConfig, OutputScaling};
use diffinfo::training::{TrainingConfig, Weighting};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GaussianEntropy,
    CfgMi,
    Kelly,
    Train,
    Estimate,
    Logdensity,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GaussianEntropy => "gaussian-entropy",
            ExperimentKind::CfgMi => "cfg-mi",
            ExperimentKind::Kelly => "kelly",
            ExperimentKind::Train => "train",
            ExperimentKind::Estimate => "estimate",
            ExperimentKind::Logdensity => "logdensity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SpecSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg: Option<CfgSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kelly: Option<KellySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logdensity: Option<LogDensitySection>,
}

fn default_jitter() -> f64 {
    1e-6
}

/// Joint Gaussian model; one cell per entry of `noise_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    pub dim_x: usize,
    pub dim_y: usize,
    pub noise_std: Vec<f64>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub spec_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Separate conditional and unconditional networks.
    Pair,
    /// One network; the null embedding gives the marginal field.
    LabelDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    Direct,
    NoiseScaled,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256, 256]
}
fn default_frequencies() -> usize {
    16
}
fn default_cond_embed() -> usize {
    32
}
fn default_drop() -> f64 {
    0.1
}
fn default_batch() -> usize {
    256
}
fn default_output() -> OutputKind {
    OutputKind::NoiseScaled
}
fn default_weighting() -> Weighting {
    Weighting::KernelVariance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub protocol: Protocol,
    pub n_train: usize,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    #[serde(default = "default_drop")]
    pub label_drop_prob: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_frequencies")]
    pub time_frequencies: usize,
    #[serde(default = "default_cond_embed")]
    pub cond_embed: usize,
    #[serde(default = "default_output")]
    pub output: OutputKind,
}

impl TrainingSection {
    /// Training configuration for a network on `data_dim` with `cond_dim`
    /// conditions (0 for unconditional).
    pub fn training_config(&self, sched: &DiffusionSchedule, data_dim: usize, cond_dim: usize, seed: u64) -> TrainingConfig {
        let network = NetworkConfig {
            data_dim,
            cond_dim,
            hidden: self.hidden.clone(),
            time_frequencies: self.time_frequencies,
            cond_embed: self.cond_embed,
            horizon: sched.horizon,
            output: match self.output {
                OutputKind::Direct => OutputScaling::Direct,
                OutputKind::NoiseScaled => OutputScaling::NoiseScaled { schedule: *sched },
            },
        };
        TrainingConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            weighting: self.weighting,
            label_drop_prob: if cond_dim == 0 { 0.0 } else { self.label_drop_prob },
            seed,
            optimizer: self.optimizer,
            network,
            log_every: (self.steps / 100).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldSource {
    Analytic,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub n_mc: usize,
    /// Quadrature intervals; defaults to the schedule's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Only read by the `estimate` experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<FieldSource>,
    /// Checkpoints for learned fields: conditional first, then marginal (pair protocol).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfgSection {
    pub dim_ys: Vec<usize>,
    pub weights: Vec<f64>,
    /// Guided samples generated per cell.
    pub n_samples: usize,
    pub ode_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChannelSpec {
    Identity,
    Useless,
    Symmetric { flip: f64 },
    Matrix { confusion: Vec<Vec<f64>> },
}

fn default_odds() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KellySection {
    #[serde(default = "default_odds")]
    pub odds: f64,
    /// Outcome probabilities; a fair six-sided die when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_true: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelSpec>,
    pub n_throws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogDensitySection {
    pub sigma_x: f64,
    pub points: Vec<f64>,
    pub n_mc: usize,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    fn require<'a, T>(&self, section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        section
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("experiment `{}` requires section `[{name}]`", self.experiment.name())))
    }

    pub fn spec(&self) -> Result<&SpecSection, CliError> {
        self.require(&self.spec, "spec")
    }
    pub fn training(&self) -> Result<&TrainingSection, CliError> {
        self.require(&self.training, "training")
    }
    pub fn estimation(&self) -> Result<&EstimationSection, CliError> {
        self.require(&self.estimation, "estimation")
    }
    pub fn cfg(&self) -> Result<&CfgSection, CliError> {
        self.require(&self.cfg, "cfg")
    }
    pub fn kelly(&self) -> Result<&KellySection, CliError> {
        self.require(&self.kelly, "kelly")
    }
    pub fn logdensity(&self) -> Result<&LogDensitySection, CliError> {
        self.require(&self.logdensity, "logdensity")
    }

    /// Estimator grid: the schedule with the estimation step count.
    pub fn estimation_schedule(&self) -> Result<DiffusionSchedule, CliError> {
        let est = self.estimation()?;
        Ok(est.steps.map_or(self.schedule, |n| self.schedule.with_steps(n)))
    }

    /// Checks that the sections needed by the experiment are present and sane.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("`{field}`: {why}")));
        self.schedule.validate().map_err(|e| CliError::Config(format!("`schedule`: {e}")))?;
        let check_spec = |s: &SpecSection| -> Result<(), CliError> {
            if s.dim_x == 0 || s.dim_y == 0 {
                return bad("spec.dim_x", "dimensions must be at least 1");
            }
            if s.noise_std.is_empty() || s.noise_std.iter().any(|v| !(*v > 0.0)) {
                return bad("spec.noise_std", "need one or more positive values");
            }
            Ok(())
        };
        let check_training = |t: &TrainingSection| -> Result<(), CliError> {
            if t.n_train == 0 {
                return bad("training.n_train", "must be at least 1");
            }
            if t.steps == 0 {
                return bad("training.steps", "must be at least 1");
            }
            if !(0.0..=1.0).contains(&t.label_drop_prob) {
                return bad("training.label_drop_prob", "must lie in [0, 1]");
            }
            if t.protocol == Protocol::LabelDrop && t.label_drop_prob == 0.0 {
                return bad("training.label_drop_prob", "label-drop protocol needs a positive drop probability");
            }
            Ok(())
        };
        let check_estimation = |e: &EstimationSection| -> Result<(), CliError> {
            if e.n_mc < diffinfo::estimators::MIN_MC_SAMPLES {
                return bad("estimation.n_mc", "must be at least 100");
            }
            if e.steps == Some(0) {
                return bad("estimation.steps", "must be at least 1");
            }
            Ok(())
        };
        match self.experiment {
            ExperimentKind::GaussianEntropy => {
                check_spec(self.spec()?)?;
                check_training(self.training()?)?;
                check_estimation(self.estimation()?)?;
            }
            ExperimentKind::CfgMi => {
                check_spec(self.spec()?)?;
                check_training(self.training()?)?;
                check_estimation(self.estimation()?)?;
                let c = self.cfg()?;
                if c.dim_ys.is_empty() || c.dim_ys.contains(&0) {
                    return bad("cfg.dim_ys", "need one or more positive dimensions");
                }
                if c.weights.is_empty() || c.weights.iter().any(|w| !(*w >= 0.0)) {
                    return bad("cfg.weights", "need one or more non-negative weights");
                }
                if c.n_samples < diffinfo::estimators::MIN_MC_SAMPLES {
                    return bad("cfg.n_samples", "must be at least 100");
                }
                if c.ode_steps < 2 {
                    return bad("cfg.ode_steps", "must be at least 2");
                }
            }
            ExperimentKind::Kelly => {
                let k = self.kelly()?;
                if k.n_throws == 0 {
                    return bad("kelly.n_throws", "must be at least 1");
                }
            }
            ExperimentKind::Train => {
                check_spec(self.spec()?)?;
                check_training(self.training()?)?;
            }
            ExperimentKind::Estimate => {
                check_spec(self.spec()?)?;
                let e = self.estimation()?;
                check_estimation(e)?;
                match e.fields {
                    None => return bad("estimation.fields", "estimate needs `analytic` or `learned`"),
                    Some(FieldSource::Learned) if e.checkpoints.is_empty() || e.checkpoints.len() > 2 => {
                        return bad("estimation.checkpoints", "learned fields need one (label-drop) or two (pair) checkpoints");
                    }
                    _ => {}
                }
            }
            ExperimentKind::Logdensity => {
                let l = self.logdensity()?;
                if !(l.sigma_x > 0.0) {
                    return bad("logdensity.sigma_x", "must be positive");
                }
                if l.points.is_empty() {
                    return bad("logdensity.points", "need at least one test point");
                }
                if l.n_mc < diffinfo::estimators::MIN_MC_SAMPLES {
                    return bad("logdensity.n_mc", "must be at least 100");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KELLY: &str = r#"
experiment = "kelly"
seed = 3
out_dir = "out/kelly"

[kelly]
n_throws = 1000
channel = { kind = "symmetric", flip = 0.2 }
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::parse(KELLY).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Kelly);
        assert_eq!(cfg.schedule, DiffusionSchedule::default());
        assert_eq!(cfg.kelly.as_ref().unwrap().odds, 6.0);
        let back = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = KELLY.replace("seed = 3\n", "");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
        let text = KELLY.replace("n_throws = 1000\n", "");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("n_throws"), "{err}");
    }

    #[test]
    fn missing_section_is_named() {
        let text = "experiment = \"logdensity\"\nseed = 1\nout_dir = \"o\"\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("[logdensity]"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{KELLY}\n[spec]\ndim_x = 2\ndim_y = 1\nnoise_std = [1.0]\nbogus = 1\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }
}
