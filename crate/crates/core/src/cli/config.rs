use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{DEFAULT_GAP_FLOOR, DEFAULT_TAIL_FRACTION};
use crate::dynamics::DEFAULT_STEPS_PER_LAYER;
use crate::flow::FlowConfig;
use crate::model::{LossKind, ModelKind};

/// Sectioned experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSection,
    pub data: DataSection,
    pub path: PathSection,
    pub flow: FlowSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub d: usize,
    /// Optional; checked against the value implied by `kind` and `d`.
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { kind: LossKind::SquaredError }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataGenerator {
    GaussianPairs,
    CircleLabels,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub generator: DataGenerator,
    /// Bound on `|x|` and `|y|` for the built-in generators.
    pub radius: f64,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub layers: usize,
    pub particles: usize,
    pub init_scale: f64,
    #[serde(default)]
    pub smoothing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub lambda: f64,
    pub dtau: f64,
    pub tau_max: f64,
    #[serde(default)]
    pub stop_slope: f64,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default = "default_steps")]
    pub steps_per_layer: usize,
    #[serde(default)]
    pub backtracking: bool,
    #[serde(default = "half")]
    pub shrink: f64,
}

fn one() -> usize {
    1
}

fn default_steps() -> usize {
    DEFAULT_STEPS_PER_LAYER
}

fn half() -> f64 {
    0.5
}

impl FlowSection {
    pub fn flow_config(&self, snapshot_every: usize) -> FlowConfig {
        FlowConfig {
            dtau: self.dtau,
            tau_max: self.tau_max,
            stop_slope: self.stop_slope,
            record_every: self.record_every,
            snapshot_every,
            backtracking: self.backtracking.then_some(self.shrink),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "gap_floor")]
    pub gap_floor: f64,
    #[serde(default = "tail_fraction")]
    pub tail_fraction: f64,
}

fn gap_floor() -> f64 {
    DEFAULT_GAP_FLOOR
}

fn tail_fraction() -> f64 {
    DEFAULT_TAIL_FRACTION
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { gap_floor: DEFAULT_GAP_FLOOR, tail_fraction: DEFAULT_TAIL_FRACTION }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    pub out_dir: Option<PathBuf>,
    /// Keep a binary snapshot every this many trace records (0: final only).
    #[serde(default)]
    pub snapshot_stride: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        // Data files are resolved relative to the config.
        if let (Some(file), Some(dir)) = (&cfg.data.file, path.parent()) {
            if file.is_relative() {
                cfg.data.file = Some(dir.join(file));
            }
        }
        if let Some(file) = &cfg.data.file {
            if cfg.data.generator == DataGenerator::File && !file.exists() {
                return Err(format!("data file {} does not exist", file.display()));
            }
        }
        Ok(cfg)
    }

    pub fn model_m(&self) -> usize {
        let d = self.model.d;
        match self.model.kind {
            ModelKind::LinearTanh => d * d + d,
            ModelKind::GatedTanh => d * d + 2 * d,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(msg.to_string()) };
        check((1..=64).contains(&self.model.d), "model.d must lie in 1..=64")?;
        if let Some(m) = self.model.m {
            check(m == self.model_m(), &format!("model.m = {m} but the model has m = {}", self.model_m()))?;
        }
        check(self.data.n >= 1, "data.n must be at least 1")?;
        check(self.data.radius > 0.0 && self.data.radius.is_finite(), "data.radius must be positive")?;
        check(
            self.data.generator != DataGenerator::File || self.data.file.is_some(),
            "data.file is required for generator = \"file\"",
        )?;
        check(self.path.layers >= 1, "path.layers must be at least 1")?;
        check(self.path.particles >= 1, "path.particles must be at least 1")?;
        check(self.path.init_scale >= 0.0 && self.path.init_scale.is_finite(), "path.init_scale must be nonnegative")?;
        check(self.flow.lambda > 0.0 && self.flow.lambda.is_finite(), "flow.lambda must be positive")?;
        check(self.flow.steps_per_layer >= 1, "flow.steps_per_layer must be at least 1")?;
        self.flow.flow_config(0).validate().map_err(|e| format!("flow: {e}"))?;
        check(self.analysis.gap_floor >= 0.0, "analysis.gap_floor must be nonnegative")?;
        check(
            self.analysis.tail_fraction > 0.0 && self.analysis.tail_fraction <= 1.0,
            "analysis.tail_fraction must lie in (0, 1]",
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[model]
kind = "gated-tanh"
d = 2
[data]
n = 5
generator = "circle-labels"
radius = 2.0
[path]
layers = 3
particles = 4
init_scale = 0.3
[flow]
lambda = 0.2
dtau = 0.01
tau_max = 1.0
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.flow.steps_per_layer, 8);
        assert_eq!(cfg.analysis.gap_floor, 1e-12);
        assert_eq!(cfg.loss.kind, LossKind::SquaredError);
        assert_eq!(cfg.model_m(), 8);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = MINIMAL.replace("tau_max = 1.0", "tau_max = 1.0\ntau_mx = 2.0");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().contains("tau_mx"));
        let bad = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn range_checks() {
        let bad = MINIMAL.replace("lambda = 0.2", "lambda = -1.0");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().contains("lambda"));
        let bad = MINIMAL.replace("d = 2", "d = 2\nm = 7");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().contains("model.m"));
    }
}
