//! Contracts for the neural stages, plus stub and subprocess implementations.
//!
//! Every forward pass the pipeline needs (detector maps, recognition, NLI
//! scoring, summarization, super-resolution) sits behind one of the traits
//! here. Stubs are deterministic and need no model files; the subprocess
//! implementations talk to an external model runner over the framed protocol
//! in [`protocol`].

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::detection::ScoreMaps;
use crate::error::BackendError;
use crate::geometry::Polygon;
use crate::imaging::{BicubicUpscaler, GrayImage, Upscaler};

pub mod protocol;
pub mod runner;
pub mod stub;
pub mod subprocess;

pub use stub::{LexiconNli, StubDetector, StubRecognizer, StubScene, TruncatingSummarizer};
pub use subprocess::{
    SubprocessClient, SubprocessDetector, SubprocessNli, SubprocessPool, SubprocessRecognizer,
    SubprocessSummarizer, SubprocessUpscaler,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Detector,
    Recognizer,
    Nli,
    Summarizer,
    Upscaler,
}

impl BackendKind {
    pub const ALL: [BackendKind; 5] = [
        BackendKind::Detector,
        BackendKind::Recognizer,
        BackendKind::Nli,
        BackendKind::Summarizer,
        BackendKind::Upscaler,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Detector => "detector",
            BackendKind::Recognizer => "recognizer",
            BackendKind::Nli => "nli",
            BackendKind::Summarizer => "summarizer",
            BackendKind::Upscaler => "upscaler",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendImpl {
    #[default]
    Stub,
    Subprocess,
}

impl fmt::Display for BackendImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendImpl::Stub => "stub",
            BackendImpl::Subprocess => "subprocess",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    pub model_id: String,
    pub launch: Vec<String>,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), String> {
        if self.implementation == BackendImpl::Subprocess && self.launch.is_empty() {
            return Err(format!("{} backend: subprocess impl needs a non-empty launch command", self.kind));
        }
        Ok(())
    }
}

/// Raw three-way NLI scores for one premise/hypothesis pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliLogits {
    pub entailment: f64,
    pub contradiction: f64,
    pub neutral: f64,
}

impl NliLogits {
    pub fn is_finite(&self) -> bool {
        self.entailment.is_finite() && self.contradiction.is_finite() && self.neutral.is_finite()
    }
}

/// Produces probability and threshold maps for a preprocessed image.
pub trait Detector: Send + Sync {
    fn infer_maps(&self, img: &GrayImage) -> Result<ScoreMaps, BackendError>;

    fn ping(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Reads the text inside each region; one string per region, in order.
pub trait Recognizer: Send + Sync {
    fn recognize(&self, img: &GrayImage, regions: &[Polygon]) -> Result<Vec<String>, BackendError>;

    fn ping(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

pub trait NliScorer: Send + Sync {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<NliLogits, BackendError>;

    fn ping(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

pub trait Summarizer: Send + Sync {
    fn summarize(&self, text: &str) -> Result<String, BackendError>;

    fn ping(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Minimum detector input size along each axis.
pub const MIN_DETECTOR_SIDE: usize = 32;

/// The full set of backends a pipeline runs against.
#[derive(Clone)]
pub struct Backends {
    pub detector: Arc<dyn Detector>,
    pub recognizer: Arc<dyn Recognizer>,
    pub nli: Arc<dyn NliScorer>,
    pub summarizer: Arc<dyn Summarizer>,
    pub upscaler: Arc<dyn Upscaler>,
    pub descriptors: Vec<BackendDescriptor>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("descriptors", &self.descriptors)
            .finish_non_exhaustive()
    }
}

impl Backends {
    /// Builds every backend named in `config`, using `timeout` per subprocess call.
    pub fn from_config(config: &AppConfig, timeout: Duration) -> Result<Self, BackendError> {
        let pool = |d: &BackendDescriptor| {
            Arc::new(SubprocessPool::new(
                d.launch.clone(),
                config.backend.pool_size,
                timeout,
            ))
        };
        let descriptors: Vec<BackendDescriptor> =
            BackendKind::ALL.iter().map(|&k| config.descriptor(k)).collect();
        for d in &descriptors {
            d.validate().map_err(BackendError::Contract)?;
        }
        let [det, rec, nli, sum, up] = [0, 1, 2, 3, 4].map(|i| &descriptors[i]);

        let detector: Arc<dyn Detector> = match det.implementation {
            BackendImpl::Stub => Arc::new(StubDetector::new(config.detector.scene())),
            BackendImpl::Subprocess => Arc::new(SubprocessDetector::new(pool(det))),
        };
        let recognizer: Arc<dyn Recognizer> = match rec.implementation {
            BackendImpl::Stub => Arc::new(StubRecognizer::new(config.recognizer.table.clone())),
            BackendImpl::Subprocess => Arc::new(SubprocessRecognizer::new(pool(rec))),
        };
        let nli_scorer: Arc<dyn NliScorer> = match nli.implementation {
            BackendImpl::Stub => Arc::new(LexiconNli::new(config.nli.lexicon.clone())),
            BackendImpl::Subprocess => Arc::new(SubprocessNli::new(pool(nli))),
        };
        let summarizer: Arc<dyn Summarizer> = match sum.implementation {
            BackendImpl::Stub => Arc::new(TruncatingSummarizer::new(config.summarizer.max_words)),
            BackendImpl::Subprocess => Arc::new(SubprocessSummarizer::new(pool(sum))),
        };
        let scale = config.tiling.scale_factor;
        let upscaler: Arc<dyn Upscaler> = match up.implementation {
            BackendImpl::Stub => Arc::new(BicubicUpscaler { scale }),
            BackendImpl::Subprocess => Arc::new(SubprocessUpscaler::new(pool(up), scale)),
        };
        Ok(Self {
            detector,
            recognizer,
            nli: nli_scorer,
            summarizer,
            upscaler,
            descriptors,
        })
    }

    /// All-stub backends for the default configuration.
    pub fn stubs() -> Self {
        Self::from_config(&AppConfig::default(), Duration::from_secs(30))
            .expect("stub backends always build")
    }

    pub fn descriptor(&self, kind: BackendKind) -> Option<&BackendDescriptor> {
        self.descriptors.iter().find(|d| d.kind == kind)
    }

    pub fn ping(&self, kind: BackendKind) -> Result<(), BackendError> {
        match kind {
            BackendKind::Detector => self.detector.ping(),
            BackendKind::Recognizer => self.recognizer.ping(),
            BackendKind::Nli => self.nli.ping(),
            BackendKind::Summarizer => self.summarizer.ping(),
            BackendKind::Upscaler => self.upscaler.ping(),
        }
    }
}
