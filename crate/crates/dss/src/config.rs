//! `dss-config-v1` experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dss_core::attacks::{AttackConfig, AttackMethod};
use dss_core::model::TrainConfig;
use dss_core::monitor::LogisticConfig;
use dss_core::stability::{DssConfig, SaliencyScoring};
use dss_core::tensor::Norm;
use dss_core::RandomSeed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mnist_files, MnistSplit};
use crate::error::{DssError, Result};
use crate::formats::read_text;

pub const CONFIG_SCHEMA: &str = "dss-config-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub dss: DssSettings,
    #[serde(default)]
    pub restorer: RestorerSettings,
    #[serde(default = "default_norms")]
    pub norms: Vec<String>,
    #[serde(default)]
    pub detector: DetectorSettings,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// How many examples, starting at `offset`, feed the triplet filter.
    #[serde(default = "default_examples")]
    pub examples: usize,
    #[serde(default)]
    pub offset: usize,
}

impl DataConfig {
    /// The MNIST test split in `dir`.
    pub fn mnist_test(dir: &Path) -> Self {
        let (images, labels) = mnist_files(dir, MnistSplit::Test);
        DataConfig { images, labels, examples: default_examples(), offset: 0 }
    }
}

/// Exactly one of `checkpoint` and `train`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_train_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_train_lr")]
    pub learning_rate: f64,
}

impl TrainSettings {
    pub fn train_config(&self, seed: RandomSeed) -> TrainConfig {
        TrainConfig { epochs: self.epochs, batch_size: self.batch_size, learning_rate: self.learning_rate, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    Fgsm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        epsilon: f64,
    },
    Pgd {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        epsilon: f64,
        /// Defaults to `epsilon / 4`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step_size: Option<f64>,
        #[serde(default = "default_pgd_iterations")]
        iterations: usize,
        #[serde(default = "default_true")]
        random_start: bool,
    },
    /// A subprocess reading one image CSV block and writing one back.
    Command {
        name: String,
        epsilon: f64,
        command: Vec<String>,
        #[serde(default)]
        reentrant: bool,
    },
    /// Pre-computed adversarial images, one row per input example.
    Recorded { name: String, epsilon: f64, adversarial: PathBuf },
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec::Fgsm { name: None, epsilon }
    }

    pub fn pgd(epsilon: f64, iterations: usize) -> Self {
        AttackSpec::Pgd { name: None, epsilon, step_size: None, iterations, random_start: true }
    }

    pub fn name(&self) -> String {
        match self {
            AttackSpec::Fgsm { name, .. } => name.clone().unwrap_or_else(|| "fgsm".into()),
            AttackSpec::Pgd { name, .. } => name.clone().unwrap_or_else(|| "pgd".into()),
            AttackSpec::Command { name, .. } | AttackSpec::Recorded { name, .. } => name.clone(),
        }
    }

    pub fn with_name(mut self, new: String) -> Self {
        match &mut self {
            AttackSpec::Fgsm { name, .. } | AttackSpec::Pgd { name, .. } => *name = Some(new),
            AttackSpec::Command { name, .. } | AttackSpec::Recorded { name, .. } => *name = new,
        }
        self
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            AttackSpec::Fgsm { epsilon, .. }
            | AttackSpec::Pgd { epsilon, .. }
            | AttackSpec::Command { epsilon, .. }
            | AttackSpec::Recorded { epsilon, .. } => epsilon,
        }
    }

    /// Same attack at another budget; PGD keeps `step = epsilon / 4` unless a
    /// step was pinned explicitly.
    pub fn with_epsilon(&self, eps: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            AttackSpec::Fgsm { epsilon, .. }
            | AttackSpec::Command { epsilon, .. }
            | AttackSpec::Recorded { epsilon, .. } => *epsilon = eps,
            AttackSpec::Pgd { epsilon, step_size, .. } => {
                *epsilon = eps;
                *step_size = None;
            }
        }
        out
    }

    /// The native attack configuration, or `None` for adapter-fed attacks.
    pub fn native(&self, seed: RandomSeed) -> Option<AttackConfig> {
        match *self {
            AttackSpec::Fgsm { epsilon, .. } => Some(AttackConfig::fgsm(epsilon)),
            AttackSpec::Pgd { epsilon, step_size, iterations, random_start, .. } => Some(AttackConfig {
                method: AttackMethod::Pgd,
                epsilon,
                step_size: step_size.unwrap_or(epsilon / 4.0),
                iterations,
                seed,
                random_start,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyOrder {
    Raw,
    Abs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DssSettings {
    #[serde(default = "default_loops")]
    pub loops: usize,
    #[serde(default = "default_ratio")]
    pub disrupt_ratio: f64,
    #[serde(default = "default_saliency")]
    pub saliency: SaliencyOrder,
}

impl Default for DssSettings {
    fn default() -> Self {
        DssSettings { loops: default_loops(), disrupt_ratio: default_ratio(), saliency: default_saliency() }
    }
}

impl DssSettings {
    pub fn dss_config(&self) -> DssConfig {
        DssConfig {
            loops: self.loops,
            disrupt_ratio: self.disrupt_ratio,
            scoring: match self.saliency {
                SaliencyOrder::Raw => SaliencyScoring::Raw,
                SaliencyOrder::Abs => SaliencyScoring::Magnitude,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RestorerSettings {
    Harmonic {
        #[serde(default = "default_inpaint_iterations")]
        max_iterations: usize,
        #[serde(default = "default_inpaint_tolerance")]
        tolerance: f64,
    },
    /// A subprocess speaking the two-block restorer wire format.
    Command { name: String, command: Vec<String> },
}

impl Default for RestorerSettings {
    fn default() -> Self {
        RestorerSettings::Harmonic { max_iterations: default_inpaint_iterations(), tolerance: default_inpaint_tolerance() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSettings {
    #[serde(default = "default_detector_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_detector_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_detector_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            learning_rate: default_detector_lr(),
            max_epochs: default_detector_epochs(),
            tolerance: default_detector_tolerance(),
            train_fraction: default_train_fraction(),
        }
    }
}

impl DetectorSettings {
    pub fn logistic(&self) -> LogisticConfig {
        LogisticConfig { learning_rate: self.learning_rate, max_epochs: self.max_epochs, tolerance: self.tolerance }
    }
}

fn default_attacks() -> Vec<AttackSpec> {
    vec![AttackSpec::fgsm(0.3), AttackSpec::pgd(0.3, default_pgd_iterations())]
}
fn default_norms() -> Vec<String> {
    Norm::ALL.iter().map(|n| n.tag().to_string()).collect()
}
fn default_examples() -> usize {
    1000
}
fn default_train_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    32
}
fn default_train_lr() -> f64 {
    0.1
}
fn default_pgd_iterations() -> usize {
    40
}
fn default_true() -> bool {
    true
}
fn default_loops() -> usize {
    5
}
fn default_ratio() -> f64 {
    0.03
}
fn default_saliency() -> SaliencyOrder {
    SaliencyOrder::Raw
}
fn default_inpaint_iterations() -> usize {
    500
}
fn default_inpaint_tolerance() -> f64 {
    1e-5
}
fn default_detector_lr() -> f64 {
    0.1
}
fn default_detector_epochs() -> usize {
    5000
}
fn default_detector_tolerance() -> f64 {
    1e-6
}
fn default_train_fraction() -> f64 {
    0.8
}

/// Seed streams derived from the experiment seed.
pub mod streams {
    pub const NOISE: u64 = 1;
    pub const ATTACK: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TRAIN: u64 = 4;
}

impl ExperimentConfig {
    /// Defaults for everything except data, model and output location.
    pub fn new(data: DataConfig, model: ModelConfig, output_dir: PathBuf) -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA.into(),
            data,
            model,
            attacks: default_attacks(),
            dss: DssSettings::default(),
            restorer: RestorerSettings::default(),
            norms: default_norms(),
            detector: DetectorSettings::default(),
            output_dir,
            seed: 0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path).map_err(|e| DssError::config(e.to_string()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| DssError::config(format!("{}: {e}", path.display())))?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(DssError::config(format!("schema `{}` is not {CONFIG_SCHEMA}", cfg.schema)));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn seed(&self, stream: u64) -> RandomSeed {
        RandomSeed(self.seed).derive(stream)
    }

    pub fn norms(&self) -> Result<Vec<Norm>> {
        let mut out = Vec::new();
        for tag in &self.norms {
            let n = Norm::from_tag(tag).ok_or_else(|| DssError::config(format!("unknown norm `{tag}` (use l1, l2, linf)")))?;
            if out.contains(&n) {
                return Err(DssError::config(format!("norm `{tag}` listed twice")));
            }
            out.push(n);
        }
        Ok(out)
    }

    pub fn attack(&self, name: &str) -> Result<&AttackSpec> {
        self.attacks
            .iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| DssError::config(format!("no attack named `{name}` in the config")))
    }

    /// Checks everything that can be checked before any work starts,
    /// including that referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(DssError::config(format!("schema `{}` is not {CONFIG_SCHEMA}", self.schema)));
        }
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(DssError::config(format!("{what} `{}` does not exist", p.display())))
            }
        };
        must_exist(&self.data.images, "image file")?;
        must_exist(&self.data.labels, "label file")?;
        if self.data.examples == 0 {
            return Err(DssError::config("data.examples must be positive"));
        }
        match (&self.model.checkpoint, &self.model.train) {
            (Some(p), None) => must_exist(p, "model checkpoint")?,
            (None, Some(t)) => {
                must_exist(&t.images, "training image file")?;
                must_exist(&t.labels, "training label file")?;
                t.train_config(RandomSeed(0)).validate().map_err(|e| DssError::config(e.to_string()))?;
            }
            _ => return Err(DssError::config("model needs exactly one of `checkpoint` and `train`")),
        }
        if self.attacks.is_empty() {
            return Err(DssError::config("at least one attack is required"));
        }
        let mut names = BTreeSet::new();
        for a in &self.attacks {
            let name = a.name();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(DssError::config(format!("attack name `{name}` must be non-empty [A-Za-z0-9._-]")));
            }
            if !names.insert(name.clone()) {
                return Err(DssError::config(format!("attack name `{name}` is used twice")));
            }
            if !(a.epsilon() > 0.0) {
                return Err(DssError::config(format!("attack `{name}` needs epsilon > 0")));
            }
            if let Some(native) = a.native(RandomSeed(0)) {
                native.validate().map_err(|e| DssError::config(format!("attack `{name}`: {e}")))?;
            }
            match a {
                AttackSpec::Recorded { adversarial, .. } => must_exist(adversarial, "recorded attack file")?,
                AttackSpec::Command { command, .. } if command.is_empty() => {
                    return Err(DssError::config(format!("attack `{name}` has an empty command")))
                }
                _ => {}
            }
        }
        self.dss.dss_config().validate().map_err(|e| DssError::config(e.to_string()))?;
        if let RestorerSettings::Command { command, .. } = &self.restorer {
            if command.is_empty() {
                return Err(DssError::config("restorer command is empty"));
            }
        }
        if self.norms()?.is_empty() {
            return Err(DssError::config("at least one norm is required"));
        }
        let d = &self.detector;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) || !(d.learning_rate > 0.0) {
            return Err(DssError::config("detector needs 0 < train_fraction < 1 and a positive learning rate"));
        }
        Ok(())
    }
}
