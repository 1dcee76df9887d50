use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignmentKind, AlignmentOptions};
use crate::annotations::AnnotationError;
use crate::content_stats::StatsError;
use crate::toy::{fixtures, SpecError, ToyDomainSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid toy task: {0}")]
    Spec(#[from] SpecError),
    #[error("target subsample: {0}")]
    Subsample(#[from] AnnotationError),
    #[error("statistics: {0}")]
    Stats(#[from] StatsError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    TargetOnly,
    Mixing,
    SeqFt,
    SMmd,
    #[default]
    Care,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::TargetOnly => "target_only",
            Method::Mixing => "mixing",
            Method::SeqFt => "seq_ft",
            Method::SMmd => "s_mmd",
            Method::Care => "care",
        }
    }
}

fn default_lambda() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    64
}
fn default_ratio() -> f64 {
    0.5
}
fn default_hidden() -> usize {
    16
}
fn default_embed() -> usize {
    8
}
fn default_log_every() -> usize {
    1
}

/// Optimization settings and the method/ablation toggles.
///
/// Toggles left unset take the method's defaults: `care` turns on class and
/// box reweighting with cycle alignment, `s_mmd` uses MMD alignment, and every
/// other method starts with everything off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CareConfig {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Fraction of each mixed batch drawn from the source domain.
    #[serde(default = "default_ratio")]
    pub source_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_class_rewt: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_box_rewt: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentKind>,
    #[serde(default)]
    pub alignment_options: AlignmentOptions,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    /// Record the loss breakdown every this many steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CareConfig {
    fn default() -> Self {
        CareConfig {
            method: Method::Care,
            lambda: default_lambda(),
            learning_rate: default_lr(),
            momentum: default_momentum(),
            steps: default_steps(),
            batch_size: default_batch(),
            source_ratio: default_ratio(),
            use_class_rewt: None,
            use_box_rewt: None,
            alignment: None,
            alignment_options: AlignmentOptions::default(),
            hidden: default_hidden(),
            embed_dim: default_embed(),
            log_every: default_log_every(),
            seed: 0,
        }
    }
}

/// Toggles after applying method defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolved {
    pub method: Method,
    pub use_class_rewt: bool,
    pub use_box_rewt: bool,
    pub alignment: AlignmentKind,
}

impl CareConfig {
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.source_ratio > 0.0 && self.source_ratio < 1.0) {
            return Err(invalid(format!(
                "source_ratio must be in (0, 1), got {}",
                self.source_ratio
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must be in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be >= 2"));
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.log_every == 0 {
            return Err(invalid("hidden, embed_dim and log_every must be > 0"));
        }
        let (class_default, box_default, align_default) = match self.method {
            Method::Care => (true, true, AlignmentKind::Cycle),
            Method::SMmd => (false, false, AlignmentKind::Mmd),
            _ => (false, false, AlignmentKind::None),
        };
        let r = Resolved {
            method: self.method,
            use_class_rewt: self.use_class_rewt.unwrap_or(class_default),
            use_box_rewt: self.use_box_rewt.unwrap_or(box_default),
            alignment: self.alignment.unwrap_or(align_default),
        };
        let single_domain = matches!(self.method, Method::SourceOnly | Method::TargetOnly | Method::SeqFt);
        if single_domain && r.alignment != AlignmentKind::None {
            return Err(invalid(format!(
                "method {} trains on one domain per step and cannot use alignment",
                self.method.name()
            )));
        }
        if self.method == Method::TargetOnly && r.use_box_rewt {
            return Err(invalid("target_only has no source boxes to reweight"));
        }
        if self.method == Method::SMmd && r.alignment != AlignmentKind::Mmd {
            return Err(invalid("s_mmd requires alignment = \"mmd\""));
        }
        Ok(r)
    }
}

fn default_fraction() -> f64 {
    1.0
}

/// Sizes of the generated splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    /// Image-level subsample applied to the target training split.
    #[serde(default = "default_fraction")]
    pub target_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_train: 3000,
            target_train: 300,
            target_test: 2000,
            target_fraction: 1.0,
            seed: 0,
        }
    }
}

/// A training run: task, data sizes and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Inline task; when absent, `task_file` is read, else the built-in
    /// imbalanced-shift task is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<ToyDomainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_file: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: CareConfig,
}

/// One row of the ablation bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCell {
    pub name: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_class_rewt: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_box_rewt: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentKind>,
}

impl BenchCell {
    fn new(
        name: &str,
        method: Method,
        class: Option<bool>,
        boxes: Option<bool>,
        alignment: Option<AlignmentKind>,
    ) -> Self {
        BenchCell {
            name: name.to_string(),
            method,
            use_class_rewt: class,
            use_box_rewt: boxes,
            alignment,
        }
    }

    /// Mixing, +S-MMD, +cycle, +P(C), +cycle+P(C), full CARE.
    pub fn ablation_rows() -> Vec<BenchCell> {
        use AlignmentKind::{Cycle, Mmd};
        vec![
            BenchCell::new("mixing", Method::Mixing, None, None, None),
            BenchCell::new("mixing+s_mmd", Method::SMmd, None, None, Some(Mmd)),
            BenchCell::new("mixing+cycle", Method::Mixing, None, None, Some(Cycle)),
            BenchCell::new("mixing+p_c", Method::Mixing, Some(true), None, None),
            BenchCell::new("mixing+cycle+p_c", Method::Mixing, Some(true), None, Some(Cycle)),
            BenchCell::new("care", Method::Care, Some(true), Some(true), Some(Cycle)),
        ]
    }

    pub fn apply(&self, base: &CareConfig) -> CareConfig {
        CareConfig {
            method: self.method,
            use_class_rewt: self.use_class_rewt,
            use_box_rewt: self.use_box_rewt,
            alignment: self.alignment,
            ..base.clone()
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Defaults to the six ablation rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<BenchCell>>,
}

impl BenchConfig {
    pub fn cells(&self) -> Vec<BenchCell> {
        self.cells.clone().unwrap_or_else(BenchCell::ablation_rows)
    }
}

/// Reads TOML (`.toml`) or JSON (anything else). Unknown keys are rejected.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path)
}

pub fn parse_config<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T, ConfigError> {
    let parse_err = |message: String| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    };
    if path.extension().and_then(|e| e.to_str()) == Some("toml") {
        toml::from_str(text).map_err(|e| parse_err(e.to_string()))
    } else {
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))
    }
}

impl ExperimentConfig {
    /// Resolves the task, reading `task_file` relative to `base_dir`.
    pub fn load_task(&self, base_dir: Option<&Path>) -> Result<ToyDomainSpec, ConfigError> {
        let spec = match (&self.task, &self.task_file) {
            (Some(_), Some(_)) => return Err(invalid("set either `task` or `task_file`, not both")),
            (Some(t), None) => t.clone(),
            (None, Some(p)) => {
                let path = match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                read_config(&path)?
            }
            (None, None) => fixtures::imbalanced_shift(),
        };
        spec.validate()?;
        Ok(spec)
    }
}
