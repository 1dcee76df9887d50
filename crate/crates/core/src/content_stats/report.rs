use std::io::Write;

use serde::{Deserialize, Serialize};

use super::box_ratio::{BoxRatioModel, RatioOutcome, Smoothing, WeightMode};
use super::kde::MIN_BANDWIDTH;
use super::{class_counts, inverse_frequency_weights, ClassWeights, StatsError};
use crate::annotations::{BoxAnnotation, DetectionDataset};

/// Bumped whenever a field of [`GapReport`] changes meaning or is removed.
pub const GAP_REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub images: usize,
    pub annotations: usize,
    pub histogram: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub zero_count: Vec<bool>,
}

/// Sample mean and covariance (n - 1 denominator; zero for n = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl Moments {
    pub fn of(points: &[[f64; 2]]) -> Option<Self> {
        let n = points.len();
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let mean = [
            points.iter().map(|p| p[0]).sum::<f64>() / nf,
            points.iter().map(|p| p[1]).sum::<f64>() / nf,
        ];
        let mut cov = [[0.0; 2]; 2];
        if n > 1 {
            for p in points {
                let d = [p[0] - mean[0], p[1] - mean[1]];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += d[i] * d[j];
                    }
                }
            }
            for row in &mut cov {
                for v in row.iter_mut() {
                    *v /= nf - 1.0;
                }
            }
        }
        Some(Moments {
            count: n,
            mean,
            covariance: cov,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        };
        Some(Summary {
            min: values[0],
            median,
            max: values[n - 1],
        })
    }
}

/// Box-ratio weights evaluated at every target annotation of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VSummary {
    pub support_points: usize,
    pub below_threshold: usize,
    pub smoothed: Summary,
    /// Natural log of the unsmoothed ratio.
    pub log_raw: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGap {
    pub class_id: usize,
    pub name: String,
    /// `P_T(c) / P_S(c)`; absent when the class never occurs in the source.
    pub frequency_ratio: Option<f64>,
    pub flagged: bool,
    pub source_size: Option<Moments>,
    pub target_size: Option<Moments>,
    pub source_location: Option<Moments>,
    pub target_location: Option<Moments>,
    pub v: Option<VSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub version: u32,
    pub classes: Vec<String>,
    pub smoothing: Smoothing,
    pub source: DomainSummary,
    pub target: DomainSummary,
    pub per_class: Vec<ClassGap>,
}

fn weights_or_uniform(counts: &[usize]) -> ClassWeights {
    inverse_frequency_weights(counts).unwrap_or_else(|_| ClassWeights::uniform(counts.len()))
}

fn summarize_domain(ds: &DetectionDataset) -> DomainSummary {
    let histogram = class_counts(ds);
    let total: usize = histogram.iter().sum();
    let w = weights_or_uniform(&histogram);
    DomainSummary {
        images: ds.images.len(),
        annotations: ds.annotations.len(),
        frequencies: histogram
            .iter()
            .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
            .collect(),
        class_weights: w.weights,
        zero_count: w.zero_count,
        histogram,
    }
}

fn class_points(ds: &DetectionDataset, c: usize, f: fn(&BoxAnnotation) -> [f64; 2]) -> Vec<[f64; 2]> {
    ds.annotations.iter().filter(|a| a.class_id == c).map(f).collect()
}

/// Content-gap diagnostics for a source/target pair.
pub fn gap_report(source: &DetectionDataset, target: &DetectionDataset) -> Result<GapReport, StatsError> {
    let model = BoxRatioModel::fit(source, target, Smoothing::default(), MIN_BANDWIDTH)?;
    let src = summarize_domain(source);
    let tgt = summarize_domain(target);
    let per_class = source
        .classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let target_boxes: Vec<&BoxAnnotation> = target.annotations.iter().filter(|a| a.class_id == c).collect();
            let v = if model.flagged(c) {
                None
            } else {
                let mut smoothed = Vec::with_capacity(target_boxes.len());
                let mut log_raw = Vec::with_capacity(target_boxes.len());
                let mut below = 0;
                for b in &target_boxes {
                    let w = model.box_ratio(b, WeightMode::Smoothed);
                    if w.outcome == RatioOutcome::BelowThreshold {
                        below += 1;
                    }
                    smoothed.push(w.v);
                    log_raw.extend(model.raw_log_ratio(b));
                }
                Summary::of(&mut smoothed)
                    .zip(Summary::of(&mut log_raw))
                    .map(|(s, l)| VSummary {
                        support_points: target_boxes.len(),
                        below_threshold: below,
                        smoothed: s,
                        log_raw: l,
                    })
            };
            let ps = src.frequencies[c];
            ClassGap {
                class_id: c,
                name: name.clone(),
                frequency_ratio: (ps > 0.0).then(|| tgt.frequencies[c] / ps),
                flagged: model.flagged(c),
                source_size: Moments::of(&class_points(source, c, BoxAnnotation::size)),
                target_size: Moments::of(&class_points(target, c, BoxAnnotation::size)),
                source_location: Moments::of(&class_points(source, c, BoxAnnotation::location)),
                target_location: Moments::of(&class_points(target, c, BoxAnnotation::location)),
                v,
            }
        })
        .collect();
    Ok(GapReport {
        version: GAP_REPORT_VERSION,
        classes: source.classes.clone(),
        smoothing: model.smoothing,
        source: src,
        target: tgt,
        per_class,
    })
}

/// One row of the per-annotation weight export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub image_id: String,
    pub annotation_index: usize,
    pub class: String,
    pub w_class: f64,
    pub v_box: f64,
    /// `w_class` times the smoothed box weight, whatever mode `v_box` uses.
    pub combined: f64,
}

/// Class weight and box weight for every annotation of `dataset`, with class
/// weights taken from `dataset` itself. `mode` only changes `v_box`.
pub fn annotation_weights(dataset: &DetectionDataset, model: &BoxRatioModel, mode: WeightMode) -> Vec<WeightRow> {
    let w = weights_or_uniform(&class_counts(dataset));
    dataset
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let w_class = w.get(a.class_id);
            let v_box = model.box_ratio(a, mode).v;
            let smoothed = match mode {
                WeightMode::Smoothed => v_box,
                WeightMode::Raw => model.box_ratio(a, WeightMode::Smoothed).v,
            };
            WeightRow {
                image_id: a.image_id.clone(),
                annotation_index: i,
                class: dataset.classes[a.class_id].clone(),
                w_class,
                v_box,
                combined: w_class * smoothed,
            }
        })
        .collect()
}

pub fn write_weights_csv<W: Write>(rows: &[WeightRow], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    if rows.is_empty() {
        writer.write_record(["image_id", "annotation_index", "class", "w_class", "v_box", "combined"])?;
    }
    writer.flush()?;
    Ok(())
}
