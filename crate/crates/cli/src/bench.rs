//! Detection throughput and per-stage latency measurement.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use docpipe_core::imaging::ColorImage;
use docpipe_core::Pipeline;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct StageStats {
    pub stage: String,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchTiming {
    pub wall_clock_s: f64,
    pub images_per_second: f64,
    pub stages: Vec<StageStats>,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub images: usize,
    pub runs: usize,
    /// Region count per image from the first run.
    pub regions: Vec<(String, usize)>,
    pub failures: Vec<String>,
    /// Run-dependent values only.
    pub timing: BenchTiming,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn run(pipeline: &Pipeline, pool: &rayon::ThreadPool, files: &[PathBuf], runs: usize) -> Result<BenchReport> {
    let images: Vec<(String, Result<ColorImage, String>)> = files
        .iter()
        .map(|p| (p.display().to_string(), ColorImage::open(p).map_err(|e| e.to_string())))
        .collect();

    let mut stages: Vec<(String, Vec<f64>)> = Vec::new();
    let mut regions = Vec::new();
    let mut failures = Vec::new();
    let mut processed = 0usize;
    let start = Instant::now();
    for pass in 0..runs {
        let outcomes: Vec<_> = pool.install(|| {
            images
                .par_iter()
                .map(|(_, img)| {
                    let img = img.as_ref().map_err(Clone::clone)?;
                    let t = Instant::now();
                    let out = pipeline.detect(img).map_err(|e| e.to_string())?;
                    Ok::<_, String>((out, t.elapsed().as_secs_f64() * 1e3))
                })
                .collect()
        });
        for ((name, _), outcome) in images.iter().zip(outcomes) {
            match outcome {
                Ok((out, total_ms)) => {
                    processed += 1;
                    if pass == 0 {
                        regions.push((name.clone(), out.regions.len()));
                    }
                    let samples = out.timings.0.iter().map(|(k, v)| (k.clone(), *v));
                    for (stage, ms) in samples.chain(std::iter::once(("total".to_string(), total_ms))) {
                        match stages.iter_mut().find(|(s, _)| *s == stage) {
                            Some((_, v)) => v.push(ms),
                            None => stages.push((stage, vec![ms])),
                        }
                    }
                }
                Err(e) if pass == 0 => failures.push(format!("{name}: {e}")),
                Err(_) => {}
            }
        }
    }
    let wall_clock_s = start.elapsed().as_secs_f64();

    let stages = stages
        .into_iter()
        .map(|(stage, mut v)| {
            v.sort_by(f64::total_cmp);
            StageStats {
                mean_ms: v.iter().sum::<f64>() / v.len() as f64,
                p50_ms: percentile(&v, 0.5),
                p95_ms: percentile(&v, 0.95),
                max_ms: *v.last().unwrap(),
                stage,
            }
        })
        .collect();
    Ok(BenchReport {
        images: files.len(),
        runs,
        regions,
        failures,
        timing: BenchTiming {
            wall_clock_s,
            images_per_second: if wall_clock_s > 0.0 { processed as f64 / wall_clock_s } else { 0.0 },
            stages,
        },
    })
}

impl BenchReport {
    /// Deterministic keys first; every run-dependent key starts with `timing.`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "images: {}", self.images);
        let _ = writeln!(out, "runs: {}", self.runs);
        let _ = writeln!(out, "failures: {}", self.failures.len());
        let total: usize = self.regions.iter().map(|(_, n)| n).sum();
        let _ = writeln!(out, "regions: {total}");
        for (name, n) in &self.regions {
            let _ = writeln!(out, "regions[{name}]: {n}");
        }
        for f in &self.failures {
            let _ = writeln!(out, "failure: {f}");
        }
        let t = &self.timing;
        let _ = writeln!(out, "timing.wall_clock_s: {:.3}", t.wall_clock_s);
        let _ = writeln!(out, "timing.images_per_second: {:.3}", t.images_per_second);
        for s in &t.stages {
            let _ = writeln!(out, "timing.{}.mean_ms: {:.3}", s.stage, s.mean_ms);
            let _ = writeln!(out, "timing.{}.p50_ms: {:.3}", s.stage, s.p50_ms);
            let _ = writeln!(out, "timing.{}.p95_ms: {:.3}", s.stage, s.p95_ms);
            let _ = writeln!(out, "timing.{}.max_ms: {:.3}", s.stage, s.max_ms);
        }
        out
    }
}
