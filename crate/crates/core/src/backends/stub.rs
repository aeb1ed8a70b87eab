//! Deterministic stand-ins for the neural backends.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Detector, NliLogits, NliScorer, Recognizer, Summarizer, MIN_DETECTOR_SIDE};
use crate::detection::ScoreMaps;
use crate::error::BackendError;
use crate::geometry::{Point, Polygon};
use crate::imaging::GrayImage;

pub const STUB_TEXT_PROB: f32 = 0.9;
pub const STUB_BACKGROUND_PROB: f32 = 0.05;
pub const STUB_THRESHOLD: f32 = 0.3;

/// What the stub detector reports as text.
#[derive(Debug, Clone, PartialEq)]
pub enum StubScene {
    /// Fixed rectangles `[x, y, w, h]` in the detector's input coordinates.
    Planted(Vec<[usize; 4]>),
    /// Every pixel darker than the threshold.
    Ink { threshold: u8 },
}

#[derive(Debug, Clone)]
pub struct StubDetector {
    scene: StubScene,
}

impl StubDetector {
    pub fn new(scene: StubScene) -> Self {
        Self { scene }
    }

    pub fn planted(rects: Vec<[usize; 4]>) -> Self {
        Self::new(StubScene::Planted(rects))
    }

    pub fn ink(threshold: u8) -> Self {
        Self::new(StubScene::Ink { threshold })
    }
}

impl Detector for StubDetector {
    fn infer_maps(&self, img: &GrayImage) -> Result<ScoreMaps, BackendError> {
        let (w, h) = (img.width(), img.height());
        if w < MIN_DETECTOR_SIDE || h < MIN_DETECTOR_SIDE {
            return Err(BackendError::Contract(format!(
                "detector input {w}x{h} is below {MIN_DETECTOR_SIDE}x{MIN_DETECTOR_SIDE}"
            )));
        }
        let mut prob = vec![STUB_BACKGROUND_PROB; w * h];
        match &self.scene {
            StubScene::Planted(rects) => {
                for &[x0, y0, rw, rh] in rects {
                    for y in y0.min(h)..(y0 + rh).min(h) {
                        for x in x0.min(w)..(x0 + rw).min(w) {
                            prob[y * w + x] = STUB_TEXT_PROB;
                        }
                    }
                }
            }
            StubScene::Ink { threshold } => {
                for (p, &v) in prob.iter_mut().zip(img.pixels()) {
                    if v < *threshold {
                        *p = STUB_TEXT_PROB;
                    }
                }
            }
        }
        ScoreMaps::new(w, h, prob, Some(vec![STUB_THRESHOLD; w * h]))
            .map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

/// Table entry for [`StubRecognizer`]: regions whose bounding-box center lies
/// in `rect` (`[x, y, w, h]`) read as `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognizerEntry {
    pub rect: [f64; 4],
    pub text: String,
}

/// Lookup-table recognizer; regions matching no entry read as "".
#[derive(Debug, Clone, Default)]
pub struct StubRecognizer {
    table: Vec<RecognizerEntry>,
}

impl StubRecognizer {
    pub fn new(table: Vec<RecognizerEntry>) -> Self {
        Self { table }
    }

    fn lookup(&self, center: Point) -> &str {
        self.table
            .iter()
            .find(|e| {
                let [x, y, w, h] = e.rect;
                center.x >= x && center.x <= x + w && center.y >= y && center.y <= y + h
            })
            .map(|e| e.text.as_str())
            .unwrap_or("")
    }
}

impl Recognizer for StubRecognizer {
    fn recognize(&self, _img: &GrayImage, regions: &[Polygon]) -> Result<Vec<String>, BackendError> {
        Ok(regions
            .iter()
            .map(|p| self.lookup(p.bbox().center()).to_string())
            .collect())
    }
}

/// Lowercased alphanumeric words.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub const LEXICON_HIT_LOGIT: f64 = 4.0;

/// Keyword-lexicon NLI scorer.
///
/// The hypothesis selects a lexicon entry by containing its label; the
/// entailment logit is [`LEXICON_HIT_LOGIT`] per distinct keyword of that entry
/// found in the premise. Contradiction and neutral are always 0.
#[derive(Debug, Clone)]
pub struct LexiconNli {
    lexicon: IndexMap<String, Vec<String>>,
}

impl LexiconNli {
    pub fn new(lexicon: IndexMap<String, Vec<String>>) -> Self {
        Self { lexicon }
    }

    pub fn default_lexicon() -> IndexMap<String, Vec<String>> {
        let entry = |label: &str, kws: &[&str]| {
            (label.to_string(), kws.iter().map(|s| s.to_string()).collect())
        };
        IndexMap::from([
            entry(
                "Invoice",
                &["invoice", "total", "due", "amount", "payment", "bill", "subtotal", "tax", "balance"],
            ),
            entry(
                "Report",
                &["report", "annual", "fiscal", "quarterly", "analysis", "findings", "revenue", "results"],
            ),
            entry(
                "Letter",
                &["dear", "sincerely", "regards", "letter", "yours", "faithfully", "correspondence"],
            ),
            entry(
                "Form",
                &["form", "applicant", "signature", "fill", "application", "checkbox", "field"],
            ),
        ])
    }

    /// Lexicon entry whose label occurs in the hypothesis; the longest label wins.
    fn entry_for(&self, hypothesis: &[String]) -> Option<&Vec<String>> {
        self.lexicon
            .iter()
            .filter_map(|(label, kws)| {
                let lw = words(label);
                let hit = !lw.is_empty() && hypothesis.windows(lw.len()).any(|win| win == lw.as_slice());
                hit.then_some((lw.len(), kws))
            })
            .max_by_key(|(len, _)| *len)
            .map(|(_, kws)| kws)
    }
}

impl Default for LexiconNli {
    fn default() -> Self {
        Self::new(Self::default_lexicon())
    }
}

impl NliScorer for LexiconNli {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<NliLogits, BackendError> {
        if hypothesis.trim().is_empty() {
            return Err(BackendError::Contract("empty hypothesis".into()));
        }
        let premise_words = words(premise);
        let hits = self
            .entry_for(&words(hypothesis))
            .map(|kws| {
                kws.iter()
                    .filter(|kw| premise_words.iter().any(|w| *w == kw.to_lowercase()))
                    .count()
            })
            .unwrap_or(0);
        Ok(NliLogits {
            entailment: LEXICON_HIT_LOGIT * hits as f64,
            contradiction: 0.0,
            neutral: 0.0,
        })
    }
}

/// Keeps the first `max_words` words, appending "…" when anything was cut.
#[derive(Debug, Clone, Copy)]
pub struct TruncatingSummarizer {
    max_words: usize,
}

impl TruncatingSummarizer {
    pub fn new(max_words: usize) -> Self {
        Self { max_words }
    }
}

impl Default for TruncatingSummarizer {
    fn default() -> Self {
        Self::new(30)
    }
}

impl Summarizer for TruncatingSummarizer {
    fn summarize(&self, text: &str) -> Result<String, BackendError> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() <= self.max_words {
            return Ok(words.join(" "));
        }
        Ok(format!("{}…", words[..self.max_words].join(" ")))
    }
}
