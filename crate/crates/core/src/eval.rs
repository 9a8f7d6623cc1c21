//! Ranking metrics and the inference benchmark.

use std::time::Instant;

use thiserror::Error;

use crate::data::{frames_to_input, prepare_frames, Clip, DataError};
use crate::model::{ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no positive labels; average precision is undefined")]
    NoPositives,
    #[error("no predictions")]
    Empty,
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check(scores: &[f32], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    if !labels.iter().any(|&l| l) {
        return Err(EvalError::NoPositives);
    }
    Ok(())
}

/// Indices by descending score; ties keep input order.
pub fn ranking(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Non-interpolated AP: mean over positives of the precision at their rank.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives)
}

/// AP with precision interpolated to its running maximum and sampled at 101 recall levels.
pub fn interpolated_ap_101(scores: &[f32], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut points = Vec::with_capacity(scores.len());
    let mut tp = 0usize;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
        }
        points.push((tp as f64 / positives, tp as f64 / (k + 1) as f64));
    }
    let sum: f64 = (0..=100)
        .map(|j| {
            let r = j as f64 / 100.0;
            points
                .iter()
                .filter(|p| p.0 >= r - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / 101.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, descending: clips scoring at least the threshold are positive.
pub fn pr_curve(scores: &[f32], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let order = ranking(scores);
    let mut out = Vec::new();
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push(PrPoint {
                threshold: scores[i],
                precision: tp as f64 / (k + 1) as f64,
                recall: tp as f64 / positives,
            });
        }
    }
    Ok(out)
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in points {
        s.push_str(&format!("{},{:.6},{:.6}\n", p.threshold, p.precision, p.recall));
    }
    s
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(precision, recall)` when clips scoring at least `threshold` are called positive.
/// Precision is 0 when nothing is called positive.
pub fn precision_recall_at(scores: &[f32], labels: &[bool], threshold: f32) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pos = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        pos += l as usize;
        if s >= threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
    (p, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub clips: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub threads: usize,
    pub mean_seconds: f64,
    pub p50_seconds: f64,
    pub p95_seconds: f64,
    pub total_seconds: f64,
    pub clips_per_second: f64,
    pub model_bytes: usize,
}

impl BenchReport {
    pub fn to_kv(&self) -> String {
        format!(
            "model={}\nclips={}\nrepetitions={}\nwarmup={}\nthreads={}\nmean_seconds={:.6}\np50_seconds={:.6}\np95_seconds={:.6}\ntotal_seconds={:.6}\nclips_per_second={:.4}\nmodel_bytes={}\n",
            self.model,
            self.clips,
            self.repetitions,
            self.warmup,
            self.threads,
            self.mean_seconds,
            self.p50_seconds,
            self.p95_seconds,
            self.total_seconds,
            self.clips_per_second,
            self.model_bytes
        )
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times frame differencing plus the forward pass per clip on the calling thread. Frame
/// sampling and resizing happen before timing; `warmup` untimed passes run first.
pub fn benchmark(
    params: &ModelParams,
    clips: &[Clip],
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if clips.is_empty() || repetitions == 0 {
        return Err(EvalError::Empty);
    }
    let cfg = params.config();
    let prepared = clips
        .iter()
        .map(|c| prepare_frames(c, cfg))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for c in prepared.iter().cycle().take(warmup) {
        params.infer(&frames_to_input(c, cfg))?;
    }
    let mut times = Vec::with_capacity(repetitions * prepared.len());
    for _ in 0..repetitions {
        for c in &prepared {
            let start = Instant::now();
            let out = params.infer(&frames_to_input(c, cfg))?;
            std::hint::black_box(&out.head_probs);
            times.push(start.elapsed().as_secs_f64());
        }
    }
    let total: f64 = times.iter().sum();
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        model: cfg.name(),
        clips: clips.len(),
        repetitions,
        warmup,
        threads: 1,
        mean_seconds: total / times.len() as f64,
        p50_seconds: percentile(&sorted, 0.5),
        p95_seconds: percentile(&sorted, 0.95),
        total_seconds: total,
        clips_per_second: times.len() as f64 / total,
        model_bytes: params.to_bytes().len(),
    })
}
