//! Zero-shot document classification by NLI entailment over templated hypotheses.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backends::NliScorer;
use crate::detection::TextRegion;
use crate::error::ClassifyError;

/// Outcome label when a document yields no text to classify.
pub const UNCLASSIFIED: &str = "Unclassified";

pub const LABEL_PLACEHOLDER: &str = "[label]";
pub const DEFAULT_TEMPLATE: &str = "This text is about [label]";
pub const DEFAULT_LABELS: [&str; 4] = ["Invoice", "Report", "Letter", "Form"];

/// Premises are cut to this many characters (keeping the head) before scoring.
pub const DEFAULT_MAX_PREMISE_CHARS: usize = 2000;

/// Ordered, distinct (case-insensitively), non-empty labels; at least two.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, ClassifyError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(ClassifyError::InvalidLabels(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if l.trim().is_empty() {
                return Err(ClassifyError::InvalidLabels("labels must be non-empty".into()));
            }
            if !seen.insert(l.to_lowercase()) {
                return Err(ClassifyError::InvalidLabels(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self(labels))
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self(DEFAULT_LABELS.iter().map(|s| s.to_string()).collect())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        LabelSet::new(Vec::<String>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct HypothesisTemplate(String);

impl HypothesisTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self, ClassifyError> {
        let pattern = pattern.into();
        let n = pattern.matches(LABEL_PLACEHOLDER).count();
        if n != 1 {
            return Err(ClassifyError::InvalidTemplate(format!(
                "`{pattern}` must contain `{LABEL_PLACEHOLDER}` exactly once, found {n}"
            )));
        }
        Ok(Self(pattern))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for HypothesisTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.to_string())
    }
}

impl<'de> Deserialize<'de> for HypothesisTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        HypothesisTemplate::new(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

pub fn build_hypothesis(label: &str, tmpl: &HypothesisTemplate) -> String {
    tmpl.0.replacen(LABEL_PLACEHOLDER, label, 1)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v <= b => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub label_probs: IndexMap<String, f64>,
    pub chosen: String,
    pub premise_chars: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

impl ClassificationResult {
    /// Uniform distribution with the [`UNCLASSIFIED`] sentinel.
    pub fn unclassified(labels: &LabelSet) -> Self {
        let p = 1.0 / labels.len() as f64;
        Self {
            label_probs: labels.labels().iter().map(|l| (l.clone(), p)).collect(),
            chosen: UNCLASSIFIED.to_string(),
            premise_chars: 0,
            summary: None,
        }
    }

    pub fn is_unclassified(&self) -> bool {
        self.chosen == UNCLASSIFIED
    }

    /// Builds the result from one entailment logit per label.
    pub fn from_entailment(labels: &LabelSet, entailment: &[f64], premise_chars: usize) -> Self {
        let probs = softmax(entailment);
        let best = argmax(&probs).expect("label set is non-empty");
        Self {
            label_probs: labels.labels().iter().cloned().zip(probs).collect(),
            chosen: labels.labels()[best].clone(),
            premise_chars,
            summary: None,
        }
    }
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Scores the premise against one hypothesis per label and softmaxes the
/// entailment logits across labels.
pub fn zero_shot_classify(
    premise: &str,
    labels: &LabelSet,
    tmpl: &HypothesisTemplate,
    scorer: &dyn NliScorer,
    max_premise_chars: usize,
) -> Result<ClassificationResult, ClassifyError> {
    let premise = premise.trim();
    if premise.is_empty() {
        return Err(ClassifyError::EmptyPremise);
    }
    let premise = truncate_chars(premise, max_premise_chars);
    let entailment = labels
        .labels()
        .iter()
        .map(|label| {
            let logits = scorer.score(premise, &build_hypothesis(label, tmpl))?;
            if !logits.is_finite() {
                return Err(ClassifyError::Backend(crate::error::BackendError::Malformed(
                    "non-finite NLI logits".into(),
                )));
            }
            Ok(logits.entailment)
        })
        .collect::<Result<Vec<_>, ClassifyError>>()?;
    Ok(ClassificationResult::from_entailment(
        labels,
        &entailment,
        premise.chars().count(),
    ))
}

/// Joins region texts in reading order (top to bottom, then left to right),
/// dropping blanks.
pub fn aggregate_document(regions: &[TextRegion], texts: &[String]) -> Result<String, ClassifyError> {
    if regions.len() != texts.len() {
        return Err(ClassifyError::LengthMismatch {
            regions: regions.len(),
            texts: texts.len(),
        });
    }
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ba, bb) = (regions[a].polygon.bbox(), regions[b].polygon.bbox());
        ba.min_y.total_cmp(&bb.min_y).then(ba.min_x.total_cmp(&bb.min_x))
    });
    let parts: Vec<&str> = order
        .into_iter()
        .map(|i| texts[i].trim())
        .filter(|t| !t.is_empty())
        .collect();
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{LexiconNli, NliLogits};
    use crate::error::BackendError;
    use crate::geometry::Polygon;

    struct Fixed(Vec<f64>, LabelSet);

    impl NliScorer for Fixed {
        fn score(&self, _premise: &str, hypothesis: &str) -> Result<NliLogits, BackendError> {
            let i = self
                .1
                .labels()
                .iter()
                .position(|l| hypothesis.ends_with(l.as_str()))
                .unwrap();
            Ok(NliLogits {
                entailment: self.0[i],
                contradiction: 0.0,
                neutral: 0.0,
            })
        }
    }

    #[test]
    fn hypotheses() {
        let t = HypothesisTemplate::default();
        assert_eq!(build_hypothesis("Invoice", &t), "This text is about Invoice");
        assert_eq!(build_hypothesis("Form", &t), "This text is about Form");
        assert_eq!(build_hypothesis("X", &HypothesisTemplate::new("Topic: [label]").unwrap()), "Topic: X");
        assert!(HypothesisTemplate::new("no placeholder").is_err());
        assert!(HypothesisTemplate::new("[label] and [label]").is_err());
    }

    #[test]
    fn label_set_rules() {
        assert!(LabelSet::new(["A"]).is_err());
        assert!(LabelSet::new(["A", "a"]).is_err());
        assert!(LabelSet::new(["A", " "]).is_err());
        assert_eq!(LabelSet::default().labels(), &["Invoice", "Report", "Letter", "Form"]);
    }

    #[test]
    fn classify_with_fixed_logits() {
        let labels = LabelSet::default();
        let scorer = Fixed(vec![2.0, 0.0, 0.0, 0.0], labels.clone());
        let r = zero_shot_classify("anything", &labels, &HypothesisTemplate::default(), &scorer, 2000).unwrap();
        // e^2 / (e^2 + 3) = 0.71123, 1 / (e^2 + 3) = 0.09626
        let want = [0.711, 0.096, 0.096, 0.096];
        for (p, w) in r.label_probs.values().zip(want) {
            assert!((p - w).abs() < 1e-3);
        }
        assert_eq!(r.chosen, "Invoice");

        let flat = Fixed(vec![1.0; 4], labels.clone());
        let r = zero_shot_classify("x", &labels, &HypothesisTemplate::default(), &flat, 2000).unwrap();
        assert!(r.label_probs.values().all(|&p| (p - 0.25).abs() < 1e-12));
        assert_eq!(r.chosen, "Invoice");
    }

    #[test]
    fn classify_with_lexicon() {
        let r = zero_shot_classify(
            "invoice total due 42.00",
            &LabelSet::default(),
            &HypothesisTemplate::default(),
            &LexiconNli::default(),
            2000,
        )
        .unwrap();
        assert_eq!(r.chosen, "Invoice");
        assert_eq!(r.premise_chars, 23);
    }

    #[test]
    fn empty_premise_rejected() {
        let err = zero_shot_classify("  \n", &LabelSet::default(), &HypothesisTemplate::default(), &LexiconNli::default(), 2000);
        assert_eq!(err.unwrap_err(), ClassifyError::EmptyPremise);
    }

    #[test]
    fn premise_is_truncated() {
        let long = "é".repeat(3000);
        let r = zero_shot_classify(&long, &LabelSet::default(), &HypothesisTemplate::default(), &LexiconNli::default(), 2000).unwrap();
        assert_eq!(r.premise_chars, 2000);
    }

    fn region(y: f64, x: f64) -> TextRegion {
        TextRegion {
            polygon: Polygon::rect(x, y, 10.0, 5.0).unwrap(),
            score: 0.9,
        }
    }

    #[test]
    fn aggregation_order() {
        assert_eq!(aggregate_document(&[region(0.0, 0.0)], &["hello".into()]).unwrap(), "hello");
        let regions = [region(50.0, 0.0), region(10.0, 0.0)];
        assert_eq!(
            aggregate_document(&regions, &["lower".into(), "upper".into()]).unwrap(),
            "upper lower"
        );
        let three = [region(0.0, 0.0), region(0.0, 20.0), region(0.0, 40.0)];
        assert_eq!(aggregate_document(&three, &["a".into(), "".into(), "b".into()]).unwrap(), "a b");
        assert!(aggregate_document(&three, &["a".into()]).is_err());
    }
}
