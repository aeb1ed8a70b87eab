//! Layered configuration: built-in defaults, then a TOML file, then
//! `DOCPIPE_*` environment variables, then explicit overrides (CLI flags).
//!
//! Environment keys map to config paths by stripping the `DOCPIPE_` prefix,
//! lowercasing, and splitting sections on `__`: `DOCPIPE_DETECTION__BIN_THRESH=0.3`
//! sets `detection.bin_thresh`. Values are parsed as TOML when possible and
//! taken as plain strings otherwise.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backends::stub::RecognizerEntry;
use crate::backends::{BackendDescriptor, BackendImpl, BackendKind, LexiconNli, StubScene};
use crate::classify::{HypothesisTemplate, LabelSet, DEFAULT_MAX_PREMISE_CHARS};
use crate::detection::DetectionParams;
use crate::error::ConfigError;
use crate::imaging::{ClaheParams, TilingParams};

pub const ENV_PREFIX: &str = "DOCPIPE_";

/// Environment variables with this prefix that are not config keys.
const ENV_IGNORED: [&str; 1] = ["DOCPIPE_LOG"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendPoolConfig {
    pub pool_size: usize,
    pub timeout_secs: u64,
    /// Per-call timeout used by batch evaluation.
    pub eval_timeout_secs: u64,
}

impl Default for BackendPoolConfig {
    fn default() -> Self {
        Self {
            pool_size: 1,
            timeout_secs: 30,
            eval_timeout_secs: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubMode {
    #[default]
    Ink,
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    pub model_id: String,
    pub launch: Vec<String>,
    pub stub_mode: StubMode,
    /// Stub ink mode: pixels darker than this read as text.
    pub ink_threshold: u8,
    /// Stub planted mode: `[x, y, w, h]` rectangles in detector input coordinates.
    pub planted: Vec<[usize; 4]>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            implementation: BackendImpl::Stub,
            model_id: "dbnetpp_resnet50_fpn".into(),
            launch: Vec::new(),
            stub_mode: StubMode::Ink,
            ink_threshold: 128,
            planted: Vec::new(),
        }
    }
}

impl DetectorConfig {
    pub fn scene(&self) -> StubScene {
        match self.stub_mode {
            StubMode::Ink => StubScene::Ink {
                threshold: self.ink_threshold,
            },
            StubMode::Planted => StubScene::Planted(self.planted.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerConfig {
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    pub model_id: String,
    pub launch: Vec<String>,
    /// Stub lookup table, in source image coordinates.
    pub table: Vec<RecognizerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NliConfig {
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    pub model_id: String,
    pub launch: Vec<String>,
    /// Stub lexicon: label to keywords.
    pub lexicon: IndexMap<String, Vec<String>>,
}

impl Default for NliConfig {
    fn default() -> Self {
        Self {
            implementation: BackendImpl::Stub,
            model_id: "facebook/bart-large-mnli".into(),
            launch: Vec::new(),
            lexicon: LexiconNli::default_lexicon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerConfig {
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    pub model_id: String,
    pub launch: Vec<String>,
    pub max_words: usize,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self {
            implementation: BackendImpl::Stub,
            model_id: "facebook/bart-large-cnn".into(),
            launch: Vec::new(),
            max_words: 30,
        }
    }
}

/// The stub upscaler is bicubic resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpscalerConfig {
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    pub model_id: String,
    pub launch: Vec<String>,
}

impl Default for UpscalerConfig {
    fn default() -> Self {
        Self {
            implementation: BackendImpl::Stub,
            model_id: "RealESRGAN_x2".into(),
            launch: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub bind: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    /// Concurrent pipeline jobs; 0 means one per CPU.
    pub workers: usize,
    /// Directory with the built operator UI; empty disables static serving.
    pub static_dir: String,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: 16 << 20,
            workers: 0,
            static_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub iou_thresh: f64,
    pub iou_resolution: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            iou_resolution: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub labels: LabelSet,
    pub hypothesis_template: HypothesisTemplate,
    pub summarize: bool,
    pub max_premise_chars: usize,
    /// Batch parallelism; 0 means one per CPU.
    pub workers: usize,
    pub clahe: ClaheParams,
    pub tiling: TilingParams,
    pub detection: DetectionParams,
    pub backend: BackendPoolConfig,
    pub detector: DetectorConfig,
    pub recognizer: RecognizerConfig,
    pub nli: NliConfig,
    pub summarizer: SummarizerConfig,
    pub upscaler: UpscalerConfig,
    pub service: ServiceSettings,
    pub eval: EvalSettings,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            labels: LabelSet::default(),
            hypothesis_template: HypothesisTemplate::default(),
            summarize: false,
            max_premise_chars: DEFAULT_MAX_PREMISE_CHARS,
            workers: 0,
            clahe: ClaheParams::default(),
            tiling: TilingParams::default(),
            detection: DetectionParams::default(),
            backend: BackendPoolConfig::default(),
            detector: DetectorConfig::default(),
            recognizer: RecognizerConfig::default(),
            nli: NliConfig::default(),
            summarizer: SummarizerConfig::default(),
            upscaler: UpscalerConfig::default(),
            service: ServiceSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Wraps `value` in nested tables along the dotted `path`.
fn nest(path: &[String], value: toml::Value) -> toml::Value {
    path.iter().rev().fold(value, |acc, key| {
        let mut t = toml::Table::new();
        t.insert(key.clone(), acc);
        toml::Value::Table(t)
    })
}

/// Parses a scalar written on a command line or in the environment.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::layered(Some(text), &[], &[])
    }

    /// Reads the optional file, then applies environment pairs and overrides.
    pub fn load(
        file: Option<&Path>,
        env: &[(String, String)],
        overrides: &[(String, toml::Value)],
    ) -> Result<Self, ConfigError> {
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?),
            None => None,
        };
        Self::layered(text.as_deref(), env, overrides)
    }

    fn layered(
        file: Option<&str>,
        env: &[(String, String)],
        overrides: &[(String, toml::Value)],
    ) -> Result<Self, ConfigError> {
        let mut value = toml::Value::try_from(AppConfig::default())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(text) = file {
            let table: toml::Table =
                toml::from_str(text).map_err(|e| ConfigError::Invalid(format!("config file: {e}")))?;
            merge(&mut value, toml::Value::Table(table));
        }
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            if ENV_IGNORED.contains(&key.as_str()) || rest.is_empty() {
                continue;
            }
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            merge(&mut value, nest(&path, parse_value(raw)));
        }
        for (key, v) in overrides {
            let path: Vec<String> = key.split('.').map(str::to_string).collect();
            merge(&mut value, nest(&path, v.clone()));
        }
        let cfg: AppConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.clahe.validate().map_err(|e| invalid(e.to_string()))?;
        self.tiling.validate().map_err(|e| invalid(e.to_string()))?;
        self.detection.validate().map_err(|e| invalid(e.to_string()))?;
        if self.service.port == 0 {
            return Err(invalid("service.port must be in 1..65535".into()));
        }
        if self.service.max_upload_bytes < 1 << 20 {
            return Err(invalid("service.max_upload_bytes must be at least 1 MiB".into()));
        }
        if self.backend.pool_size == 0 {
            return Err(invalid("backend.pool_size must be >= 1".into()));
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(invalid("eval.iou_thresh must be in (0, 1]".into()));
        }
        if self.max_premise_chars == 0 {
            return Err(invalid("max_premise_chars must be >= 1".into()));
        }
        for kind in BackendKind::ALL {
            self.descriptor(kind).validate().map_err(invalid)?;
        }
        Ok(())
    }

    pub fn descriptor(&self, kind: BackendKind) -> BackendDescriptor {
        let (implementation, model_id, launch) = match kind {
            BackendKind::Detector => (self.detector.implementation, &self.detector.model_id, &self.detector.launch),
            BackendKind::Recognizer => (
                self.recognizer.implementation,
                &self.recognizer.model_id,
                &self.recognizer.launch,
            ),
            BackendKind::Nli => (self.nli.implementation, &self.nli.model_id, &self.nli.launch),
            BackendKind::Summarizer => (
                self.summarizer.implementation,
                &self.summarizer.model_id,
                &self.summarizer.launch,
            ),
            BackendKind::Upscaler => (self.upscaler.implementation, &self.upscaler.model_id, &self.upscaler.launch),
        };
        BackendDescriptor {
            kind,
            implementation,
            model_id: model_id.clone(),
            launch: launch.clone(),
        }
    }

    /// Effective worker count for batch work.
    pub fn batch_workers(&self) -> usize {
        resolve_workers(self.workers)
    }
}

pub fn resolve_workers(n: usize) -> usize {
    if n > 0 {
        n
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// `DOCPIPE_*` pairs from the process environment.
pub fn env_pairs() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_example_matches_defaults() {
        let text = include_str!("../../../docs/config.example.toml");
        assert_eq!(AppConfig::from_toml_str(text).unwrap(), AppConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = AppConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert_eq!(cfg.detection.bin_thresh, 0.25);
        assert_eq!(cfg.clahe.clip_limit, 8.0);
        assert_eq!(cfg.tiling, TilingParams { tile_size: 64, overlap: 16, scale_factor: 2 });
    }

    #[test]
    fn precedence_flag_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[detection]\nbin_thresh = 0.3\nmin_height = 7.0\n[service]\nport = 9000\n").unwrap();
        let env = vec![
            ("DOCPIPE_DETECTION__BIN_THRESH".to_string(), "0.4".to_string()),
            ("DOCPIPE_SERVICE__PORT".to_string(), "9100".to_string()),
        ];
        let overrides = vec![("detection.bin_thresh".to_string(), parse_value("0.5"))];
        let cfg = AppConfig::load(Some(&path), &env, &overrides).unwrap();
        assert_eq!(cfg.detection.bin_thresh, 0.5);
        assert_eq!(cfg.service.port, 9100);
        assert_eq!(cfg.detection.min_height, 7.0);

        let cfg = AppConfig::load(Some(&path), &[], &[]).unwrap();
        assert_eq!(cfg.detection.bin_thresh, 0.3);
        let cfg = AppConfig::load(None, &[], &[]).unwrap();
        assert_eq!(cfg.detection.bin_thresh, 0.25);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(AppConfig::from_toml_str("labels = [\"A\"]").is_err());
        assert!(AppConfig::from_toml_str("hypothesis_template = \"nothing\"").is_err());
        assert!(AppConfig::from_toml_str("[detection]\nbogus = 1").is_err());
        assert!(AppConfig::from_toml_str("[detector]\nimpl = \"subprocess\"").is_err());
        assert!(AppConfig::from_toml_str("[service]\nmax_upload_bytes = 10").is_err());
    }

    #[test]
    fn env_string_values_and_lists() {
        let env = vec![
            ("DOCPIPE_LABELS".to_string(), "[\"A\", \"B\"]".to_string()),
            ("DOCPIPE_HYPOTHESIS_TEMPLATE".to_string(), "About [label]".to_string()),
            ("DOCPIPE_LOG".to_string(), "debug".to_string()),
        ];
        let cfg = AppConfig::load(None, &env, &[]).unwrap();
        assert_eq!(cfg.labels.labels(), &["A", "B"]);
        assert_eq!(cfg.hypothesis_template.as_str(), "About [label]");
    }
}
