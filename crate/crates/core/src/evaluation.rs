//! Polygon detection evaluation: ground-truth parsing, IoU matching with
//! don't-care regions, micro-averaged precision/recall/F-measure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::TextRegion;
use crate::error::EvalError;
use crate::geometry::{raster_iou, BBox, Polygon};
use crate::imaging::ColorImage;
use crate::pipeline::Pipeline;

/// Transcription marking an unreadable region.
pub const DONT_CARE: &str = "###";
pub const DEFAULT_IOU_RESOLUTION: usize = 512;
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRegion {
    pub polygon: Polygon,
    pub transcription: String,
    pub dont_care: bool,
}

fn parse_err(line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_gt_line(line: &str, no: usize) -> Result<GtRegion, EvalError> {
    // A trailing quoted field may contain commas; coordinates never contain quotes.
    let (coords, transcription) = if line.ends_with('"') && line.len() >= 2 {
        let q = line.find('"').unwrap();
        let quoted = &line[q..];
        if q == 0 || !line[..q].ends_with(',') || quoted.len() < 2 {
            return Err(parse_err(no, "malformed quoted transcription"));
        }
        (&line[..q - 1], quoted[1..quoted.len() - 1].replace("\"\"", "\""))
    } else {
        let (c, t) = line
            .rsplit_once(',')
            .ok_or_else(|| parse_err(no, "expected coordinates followed by a transcription"))?;
        (c, t.to_string())
    };
    let values = coords
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(no, format!("bad coordinate `{}`", v.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() % 2 != 0 {
        return Err(parse_err(no, format!("odd coordinate count {}", values.len())));
    }
    if values.len() < 6 {
        return Err(parse_err(no, format!("need at least 3 points, got {}", values.len() / 2)));
    }
    let polygon = Polygon::from_flat(&values).map_err(|e| parse_err(no, e.to_string()))?;
    Ok(GtRegion {
        dont_care: transcription == DONT_CARE,
        polygon,
        transcription,
    })
}

/// Parses the line format `x1,y1,...,xn,yn,transcription`.
pub fn parse_gt_file(text: &str) -> Result<Vec<GtRegion>, EvalError> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let line = raw.trim();
            (!line.is_empty() && !line.starts_with('#')).then(|| parse_gt_line(line, i + 1))
        })
        .collect()
}

/// Parses detection lines `score;x1,y1,...`.
pub fn parse_predictions(text: &str) -> Result<Vec<TextRegion>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| TextRegion::parse_line(l.trim()).map_err(|m| parse_err(i + 1, m)))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detection index, gt index, iou)` for each true positive.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Detections dropped for overlapping a don't-care region.
    pub ignored: usize,
}

impl MatchResult {
    pub fn add(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.ignored += other.ignored;
    }
}

fn bboxes_overlap(a: &BBox, b: &BBox) -> bool {
    a.min_x < b.max_x && b.min_x < a.max_x && a.min_y < b.max_y && b.min_y < a.max_y
}

fn iou(a: &Polygon, b: &Polygon, resolution: usize) -> f64 {
    if bboxes_overlap(&a.bbox(), &b.bbox()) {
        raster_iou(a, b, resolution)
    } else {
        0.0
    }
}

/// Greedy score-ordered one-to-one matching.
pub fn match_detections(dets: &[TextRegion], gts: &[GtRegion], iou_thresh: f64, resolution: usize) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for d in order {
        let poly = &dets[d].polygon;
        let hits_dont_care = gts
            .iter()
            .any(|g| g.dont_care && iou(poly, &g.polygon, resolution) >= iou_thresh);
        if hits_dont_care {
            result.ignored += 1;
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.dont_care || taken[g] {
                continue;
            }
            let v = iou(poly, &gt.polygon, resolution);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                taken[g] = true;
                result.pairs.push((d, g, v));
                result.tp += 1;
            }
            None => result.fp += 1,
        }
    }
    let cared = gts.iter().filter(|g| !g.dont_care).count();
    result.fn_ = cared - result.tp;
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// P is 0 with no detections, R is 1 with no ground truth, F is 0 when P+R is 0.
pub fn compute_prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f_measure,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub detections: usize,
    pub ground_truth: usize,
    #[serde(flatten)]
    pub result: MatchResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub wall_clock_s: f64,
    pub images_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ignored: usize,
    pub per_image: Vec<ImageEval>,
    pub skipped: Vec<SkippedImage>,
    /// Everything that varies run to run lives here.
    pub timing: EvalTiming,
}

impl EvalReport {
    pub fn from_images(per_image: Vec<ImageEval>, skipped: Vec<SkippedImage>, iou_thresh: f64, wall_clock_s: f64) -> Self {
        let mut totals = MatchResult::default();
        for img in &per_image {
            totals.add(&img.result);
        }
        let prf = compute_prf(totals.tp, totals.fp, totals.fn_);
        let images_per_second = if wall_clock_s > 0.0 {
            per_image.len() as f64 / wall_clock_s
        } else {
            0.0
        };
        Self {
            iou_thresh,
            precision: prf.precision,
            recall: prf.recall,
            f_measure: prf.f_measure,
            tp: totals.tp,
            fp: totals.fp,
            fn_: totals.fn_,
            ignored: totals.ignored,
            per_image,
            skipped,
            timing: EvalTiming {
                wall_clock_s,
                images_per_second,
            },
        }
    }

    /// Key-value summary followed by a per-image table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "iou_thresh: {}", self.iou_thresh);
        let _ = writeln!(out, "images: {}", self.per_image.len());
        let _ = writeln!(out, "skipped: {}", self.skipped.len());
        let _ = writeln!(out, "tp: {}", self.tp);
        let _ = writeln!(out, "fp: {}", self.fp);
        let _ = writeln!(out, "fn: {}", self.fn_);
        let _ = writeln!(out, "ignored: {}", self.ignored);
        let _ = writeln!(out, "precision: {:.4}", self.precision);
        let _ = writeln!(out, "recall: {:.4}", self.recall);
        let _ = writeln!(out, "f_measure: {:.4}", self.f_measure);
        let _ = writeln!(out, "timing.wall_clock_s: {:.3}", self.timing.wall_clock_s);
        let _ = writeln!(out, "timing.images_per_second: {:.3}", self.timing.images_per_second);
        let _ = writeln!(out);
        let _ = writeln!(out, "image\tdets\tgt\ttp\tfp\tfn\tignored");
        for img in &self.per_image {
            let r = &img.result;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                img.name, img.detections, img.ground_truth, r.tp, r.fp, r.fn_, r.ignored
            );
        }
        for s in &self.skipped {
            let _ = writeln!(out, "skipped\t{}\t{}", s.name, s.reason);
        }
        out
    }
}

/// Where detections come from.
pub enum PredictionSource<'a> {
    /// Run the pipeline over every image in the directory.
    Pipeline { images: &'a Path, pipeline: &'a Pipeline },
    /// Read `<stem>.txt` detection files, one per ground-truth file.
    Files { predictions: &'a Path },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    pub iou_thresh: f64,
    pub iou_resolution: usize,
    pub workers: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            iou_resolution: DEFAULT_IOU_RESOLUTION,
            workers: 1,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sorted files in `dir` whose extension (case-insensitive) is in `exts`.
pub fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, EvalError> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_lowercase);
        if path.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_text(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Evaluates every image against `<gt_dir>/<stem>.txt`. Missing or
/// unreadable inputs are listed in the report's `skipped` and do not abort
/// the run.
pub fn evaluate_dataset(gt_dir: &Path, source: PredictionSource<'_>, params: &EvalParams) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let items: Vec<(String, PathBuf)> = match &source {
        PredictionSource::Pipeline { images, .. } => list_files(images, &IMAGE_EXTENSIONS)?,
        PredictionSource::Files { .. } => list_files(gt_dir, &["txt"])?,
    }
    .into_iter()
    .map(|p| (stem(&p), p))
    .collect();

    let eval_one = |(name, path): &(String, PathBuf)| -> Result<ImageEval, String> {
        let gt_text = read_text(&gt_dir.join(format!("{name}.txt")))?;
        let gts = parse_gt_file(&gt_text).map_err(|e| format!("ground truth: {e}"))?;
        let dets = match &source {
            PredictionSource::Pipeline { pipeline, .. } => {
                let img = ColorImage::open(path).map_err(|e| e.to_string())?;
                pipeline.detect(&img).map_err(|e| e.to_string())?.regions
            }
            PredictionSource::Files { predictions } => {
                let text = read_text(&predictions.join(format!("{name}.txt")))?;
                parse_predictions(&text).map_err(|e| format!("predictions: {e}"))?
            }
        };
        Ok(ImageEval {
            name: name.clone(),
            detections: dets.len(),
            ground_truth: gts.iter().filter(|g| !g.dont_care).count(),
            result: match_detections(&dets, &gts, params.iou_thresh, params.iou_resolution),
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.workers.max(1))
        .build()
        .map_err(|e| io_err(gt_dir, std::io::Error::other(e)))?;
    let outcomes: Vec<Result<ImageEval, String>> = pool.install(|| items.par_iter().map(eval_one).collect());

    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for ((name, _), outcome) in items.iter().zip(outcomes) {
        match outcome {
            Ok(e) => per_image.push(e),
            Err(reason) => {
                log::warn!("skipping {name}: {reason}");
                skipped.push(SkippedImage {
                    name: name.clone(),
                    reason,
                })
            }
        }
    }
    Ok(EvalReport::from_images(
        per_image,
        skipped,
        params.iou_thresh,
        start.elapsed().as_secs_f64(),
    ))
}
