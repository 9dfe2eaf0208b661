//! Experiment configuration: a versioned TOML document with `key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use step_core::engine::{ExtensionMode, StepConfig};
use step_core::model::OracleModel;
use step_core::proposals::{PyramidLevel, PyramidSpec};
use step_core::simulator::SceneSpec;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "STEP_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Seed of every random stream except scene generation.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub num_videos: usize,
    pub step: StepConfig,
    /// Video `i` is generated with seed `scene.seed + i`.
    pub scene: SceneSpec,
    pub proposals: ProposalConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: None,
            num_videos: 20,
            step: StepConfig::default(),
            scene: SceneSpec::default(),
            proposals: ProposalConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalLayout {
    /// 11 coarse boxes: full frame, a 3x3 half-size grid and a centred box.
    Coarse11,
    /// Two-level pyramid with 34 boxes.
    Ava,
    /// Pyramid levels given by `levels` and `centered`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub layout: ProposalLayout,
    pub levels: Vec<PyramidLevel>,
    pub centered: Vec<f64>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            layout: ProposalLayout::Coarse11,
            levels: Vec::new(),
            centered: Vec::new(),
        }
    }
}

impl ProposalConfig {
    pub fn pyramid(&self, width: f64, height: f64) -> PyramidSpec {
        match self.layout {
            ProposalLayout::Coarse11 => PyramidSpec::coarse11(width, height),
            ProposalLayout::Ava => PyramidSpec::ava(width, height),
            ProposalLayout::Custom => PyramidSpec {
                width,
                height,
                levels: self.levels.clone(),
                centered: self.centered.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Oracle,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Oracle offset noise half-width.
    pub noise: f64,
    pub sharpness: f64,
    pub context_gain: f64,
    pub frame_jitter: f64,
    /// Checkpoint for `kind = "linear"`; defaults to `heads.json` in the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Uniform noise half-width added to synthesized features.
    pub feature_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let o = OracleModel::default();
        ModelConfig {
            kind: ModelKind::Oracle,
            noise: 0.15,
            sharpness: o.sharpness,
            context_gain: o.context_gain,
            frame_jitter: o.frame_jitter,
            checkpoint: None,
            feature_noise: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn oracle(&self, mode: ExtensionMode) -> OracleModel {
        OracleModel {
            noise: self.noise,
            sharpness: self.sharpness,
            context_gain: self.context_gain,
            frame_jitter: self.frame_jitter,
            anticipate: mode == ExtensionMode::Anticipate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Clips per joint training pass.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            learning_rate: step_core::training::TrainSettings::default().learning_rate,
            batch: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub video_thresholds: Vec<f64>,
    pub link_threshold: f64,
    pub trim_penalty: f64,
    /// Per-class NMS threshold on clip detections; `None` keeps every proposal.
    pub nms_threshold: Option<f64>,
    pub histogram_bin: f64,
    /// Tube lengths at which MIUT is reported.
    pub miut_lengths: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            video_thresholds: vec![0.05, 0.1, 0.2, 0.5],
            link_threshold: 0.3,
            trim_penalty: 0.5,
            nms_threshold: Some(0.5),
            histogram_bin: 0.1,
            miut_lengths: vec![6, 30],
        }
    }
}

/// Configuration-level error (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

impl ExperimentConfig {
    /// Parses a document, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| config_err(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| config_err(format!("config schema error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.num_videos == 0 {
            return Err(config_err("num_videos must be >= 1"));
        }
        let core = |e: step_core::StepError| config_err(e.to_string());
        self.step.validate().map_err(core)?;
        self.scene.validate().map_err(core)?;
        self.proposals
            .pyramid(self.scene.width, self.scene.height)
            .validate()
            .map_err(core)?;
        if self.scene.video_len < self.step.clip_len {
            return Err(config_err(format!(
                "video_len {} is shorter than one clip ({})",
                self.scene.video_len, self.step.clip_len
            )));
        }
        let m = &self.model;
        if !(m.noise >= 0.0 && m.feature_noise >= 0.0 && m.context_gain >= 0.0) {
            return Err(config_err("model noise terms must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&m.frame_jitter) {
            return Err(config_err("model.frame_jitter must lie in [0, 1]"));
        }
        if self.train.batch == 0 {
            return Err(config_err("train.batch must be >= 1"));
        }
        if !(self.train.learning_rate >= 0.0) {
            return Err(config_err("train.learning_rate must be >= 0"));
        }
        let e = &self.eval;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(e.iou_threshold)
            || !unit(e.link_threshold)
            || !e.video_thresholds.iter().all(|&t| unit(t))
            || !e.nms_threshold.map_or(true, unit)
        {
            return Err(config_err("eval thresholds must lie in [0, 1]"));
        }
        if !(e.histogram_bin > 0.0 && e.histogram_bin <= 1.0) {
            return Err(config_err("eval.histogram_bin must lie in (0, 1]"));
        }
        if !(e.trim_penalty >= 0.0) {
            return Err(config_err("eval.trim_penalty must be >= 0"));
        }
        if e.miut_lengths.iter().any(|&l| l == 0) {
            return Err(config_err("eval.miut_lengths must be >= 1"));
        }
        Ok(())
    }

    /// Canonical TOML rendering of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Output directory: flag, then config, then environment, then `step-out`.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("step-out"))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets a dotted key (`step.clip_len=12`). The value is parsed as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn overrides_beat_document() {
        let text = "seed = 3\n[step]\nclip_len = 8\n";
        let cfg = ExperimentConfig::from_toml(
            text,
            &["step.clip_len=4".into(), "model.kind=linear".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.step.clip_len, 4);
        assert_eq!(cfg.model.kind, ModelKind::Linear);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml("[step]\nclip_length = 6\n", &[]).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(ExperimentConfig::from_toml("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for o in [
            "version=2",
            "step.extend_at=[true, true, true]",
            "step.tau=[0.5, 0.4, 0.3]",
            "num_videos=0",
            "eval.histogram_bin=0.0",
            "scene.video_len=3",
        ] {
            assert!(ExperimentConfig::from_toml("", &[o.into()]).is_err(), "{o}");
        }
    }

    #[test]
    fn override_string_fallback_and_arrays() {
        let cfg = ExperimentConfig::from_toml(
            "",
            &[
                "step.extension_mode=none".into(),
                "eval.video_thresholds=[0.2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.step.extension_mode, ExtensionMode::None);
        assert_eq!(cfg.eval.video_thresholds, vec![0.2]);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rendering_round_trips() {
        let cfg = ExperimentConfig::from_toml("", &["model.checkpoint=\"h.json\"".into()]).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
