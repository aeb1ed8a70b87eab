//! End-to-end composition of the stages: preprocessing, detection,
//! recognition, aggregation and zero-shot classification.

use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendKind, Backends, MIN_DETECTOR_SIDE};
use crate::classify::{aggregate_document, zero_shot_classify, ClassificationResult, HypothesisTemplate, LabelSet};
use crate::config::AppConfig;
use crate::detection::{detect_text, DetectionParams, TextRegion};
use crate::error::{BackendError, ClassifyError, Error, ImagingError};
use crate::imaging::{clahe, to_grayscale, upscale_tiled, ClaheParams, ColorImage, PreprocessStages, TilingParams};

/// Wall-clock milliseconds per stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageTimings(pub IndexMap<String, f64>);

impl StageTimings {
    /// Runs `f` and records its duration under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64() * 1e3;
        out
    }

    pub fn get(&self, stage: &str) -> Option<f64> {
        self.0.get(stage).copied()
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub tiling: TilingParams,
    pub clahe: ClaheParams,
    pub detection: DetectionParams,
    pub labels: LabelSet,
    pub template: HypothesisTemplate,
    pub summarize: bool,
    pub max_premise_chars: usize,
}

impl PipelineSettings {
    pub fn from_config(cfg: &AppConfig) -> Self {
        Self {
            tiling: cfg.tiling,
            clahe: cfg.clahe,
            detection: cfg.detection,
            labels: cfg.labels.clone(),
            template: cfg.hypothesis_template.clone(),
            summarize: cfg.summarize,
            max_premise_chars: cfg.max_premise_chars,
        }
    }
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self::from_config(&AppConfig::default())
    }
}

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// Regions in source image coordinates, by descending score.
    pub regions: Vec<TextRegion>,
    pub stages: PreprocessStages,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocumentOutcome {
    pub classification: ClassificationResult,
    pub regions: Vec<TextRegion>,
    /// Recognized text per region, aligned with `regions`.
    pub texts: Vec<String>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub settings: PipelineSettings,
    pub backends: Backends,
}

impl Pipeline {
    pub fn new(settings: PipelineSettings, backends: Backends) -> Self {
        Self { settings, backends }
    }

    pub fn from_config(cfg: &AppConfig, timeout: std::time::Duration) -> Result<Self, Error> {
        let backends = Backends::from_config(cfg, timeout).map_err(|e| Error::Config(crate::error::ConfigError::Invalid(e.to_string())))?;
        Ok(Self::new(PipelineSettings::from_config(cfg), backends))
    }

    /// All-stub backends with default settings.
    pub fn stubs() -> Self {
        Self::new(PipelineSettings::default(), Backends::stubs())
    }

    /// Source-to-detector coordinate factor.
    pub fn scale(&self) -> usize {
        self.backends.upscaler.scale_factor()
    }

    pub fn preprocess(&self, img: &ColorImage, timings: &mut StageTimings) -> Result<PreprocessStages, Error> {
        let gray = timings.time("grayscale", || to_grayscale(img));
        let tiling = &self.settings.tiling;
        let super_resolved = if tiling.scale_factor == 1 && self.scale() == 1 {
            gray.clone()
        } else {
            timings
                .time("super_resolution", || upscale_tiled(&gray, tiling, self.backends.upscaler.as_ref()))
                .map_err(|e| Error::backend(BackendKind::Upscaler, e))?
        };
        let enhanced = timings.time("clahe", || clahe(&super_resolved, &self.settings.clahe))?;
        Ok(PreprocessStages {
            gray,
            super_resolved,
            enhanced,
        })
    }

    pub fn detect(&self, img: &ColorImage) -> Result<DetectionOutput, Error> {
        let mut timings = StageTimings::default();
        let stages = self.preprocess(img, &mut timings)?;
        let input = &stages.enhanced;
        if input.width() < MIN_DETECTOR_SIDE || input.height() < MIN_DETECTOR_SIDE {
            return Err(ImagingError::BelowDetectorMinimum {
                width: input.width(),
                height: input.height(),
                min: MIN_DETECTOR_SIDE,
            }
            .into());
        }
        let maps = timings
            .time("detector", || self.backends.detector.infer_maps(input))
            .map_err(|e| Error::backend(BackendKind::Detector, e))?;
        if maps.width() != input.width() || maps.height() != input.height() {
            return Err(Error::backend(
                BackendKind::Detector,
                BackendError::Malformed(format!(
                    "maps are {}x{} for a {}x{} input",
                    maps.width(),
                    maps.height(),
                    input.width(),
                    input.height()
                )),
            ));
        }
        let found = timings.time("postprocess", || detect_text(&maps, &self.settings.detection))?;
        let inv = 1.0 / self.scale() as f64;
        let regions = found
            .into_iter()
            .map(|r| TextRegion {
                polygon: r.polygon.scaled(inv),
                score: r.score,
            })
            .collect();
        Ok(DetectionOutput {
            regions,
            stages,
            timings,
        })
    }

    /// Classifies with the configured labels, template and summarize flag.
    pub fn classify(&self, img: &ColorImage) -> Result<DocumentOutcome, Error> {
        let s = &self.settings;
        self.classify_document(img, &s.labels, &s.template, s.summarize)
    }

    /// Full pipeline. Documents without recognizable text come back as the
    /// unclassified outcome rather than an error.
    pub fn classify_document(
        &self,
        img: &ColorImage,
        labels: &LabelSet,
        template: &HypothesisTemplate,
        summarize: bool,
    ) -> Result<DocumentOutcome, Error> {
        let DetectionOutput {
            regions,
            stages,
            mut timings,
        } = self.detect(img)?;
        let polygons: Vec<_> = regions.iter().map(|r| r.polygon.clone()).collect();
        let texts = if polygons.is_empty() {
            Vec::new()
        } else {
            timings
                .time("recognize", || self.backends.recognizer.recognize(&stages.gray, &polygons))
                .map_err(|e| Error::backend(BackendKind::Recognizer, e))?
        };
        if texts.len() != regions.len() {
            return Err(Error::backend(
                BackendKind::Recognizer,
                BackendError::CountMismatch {
                    expected: regions.len(),
                    got: texts.len(),
                },
            ));
        }
        let premise = aggregate_document(&regions, &texts)?;
        if premise.trim().is_empty() {
            return Ok(DocumentOutcome {
                classification: ClassificationResult::unclassified(labels),
                regions,
                texts,
                timings,
            });
        }
        let scorer = self.backends.nli.as_ref();
        let mut classification = timings
            .time("classify", || {
                zero_shot_classify(&premise, labels, template, scorer, self.settings.max_premise_chars)
            })
            .map_err(|e| match e {
                ClassifyError::Backend(b) => Error::backend(BackendKind::Nli, b),
                other => other.into(),
            })?;
        if summarize {
            let summary = timings
                .time("summarize", || self.backends.summarizer.summarize(&premise))
                .map_err(|e| Error::backend(BackendKind::Summarizer, e))?;
            classification.summary = Some(summary);
        }
        Ok(DocumentOutcome {
            classification,
            regions,
            texts,
            timings,
        })
    }
}
