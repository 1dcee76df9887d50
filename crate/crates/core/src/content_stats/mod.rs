//! Content-gap statistics: class frequencies, inverse-frequency class
//! weights, and class-conditional box density ratios.

mod box_ratio;
mod kde;
mod report;

pub use box_ratio::{
    fit_box_ratio_model, sigmoid, BoxRatioModel, BoxWeight, ConditionalKde, RatioOutcome, Smoothing, WeightMode,
};
pub use kde::{sample_std, scott_factor, Kde2, MIN_BANDWIDTH};
pub use report::{
    annotation_weights, gap_report, write_weights_csv, ClassGap, DomainSummary, GapReport, Moments, Summary, VSummary,
    WeightRow, GAP_REPORT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{DetectionDataset, Domain};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("cannot fit a KDE to zero points")]
    EmptyKde,
    #[error("bandwidth must be positive, got {0:?}")]
    InvalidBandwidth([f64; 2]),
    #[error("class counts are all zero")]
    AllZeroCounts,
    #[error("source has {source_k} classes but target has {target_k}")]
    ClassMismatch { source_k: usize, target_k: usize },
}

/// Number of annotations per class.
pub fn class_counts(dataset: &DetectionDataset) -> Vec<usize> {
    let mut counts = vec![0; dataset.num_classes()];
    for a in &dataset.annotations {
        if let Some(c) = counts.get_mut(a.class_id) {
            *c += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    /// Classes with no annotations; their weight is 1.0.
    pub zero_count: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; k],
            counts: vec![0; k],
            zero_count: vec![false; k],
            domain: None,
        }
    }

    pub fn get(&self, class_id: usize) -> f64 {
        self.weights.get(class_id).copied().unwrap_or(1.0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `sum_c w(c) * N(c)`.
    pub fn weighted_mass(&self) -> f64 {
        self.weights.iter().zip(&self.counts).map(|(w, &n)| w * n as f64).sum()
    }
}

/// `w(c) = N_total / (K * N(c))`, i.e. `1 / (K * P(c))`. A uniform class
/// distribution gets weight 1 everywhere.
pub fn inverse_frequency_weights(counts: &[usize]) -> Result<ClassWeights, StatsError> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(StatsError::AllZeroCounts);
    }
    let k = counts.len() as f64;
    let weights = counts
        .iter()
        .map(|&n| if n == 0 { 1.0 } else { total as f64 / (k * n as f64) })
        .collect();
    Ok(ClassWeights {
        weights,
        counts: counts.to_vec(),
        zero_count: counts.iter().map(|&n| n == 0).collect(),
        domain: None,
    })
}

/// Class weights for a dataset, tagged with its domain.
pub fn dataset_class_weights(dataset: &DetectionDataset) -> Result<ClassWeights, StatsError> {
    let mut w = inverse_frequency_weights(&class_counts(dataset))?;
    w.domain = Some(dataset.domain);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{BoxAnnotation, ImageInfo};
    use proptest::prelude::*;

    fn ds(classes: &[usize]) -> DetectionDataset {
        DetectionDataset {
            domain: Domain::Source,
            classes: vec!["car".into(), "bus".into()],
            category_ids: None,
            images: vec![ImageInfo {
                id: "i".into(),
                width: 1.0,
                height: 1.0,
            }],
            annotations: classes
                .iter()
                .map(|&c| BoxAnnotation {
                    image_id: "i".into(),
                    class_id: c,
                    cx: 0.5,
                    cy: 0.5,
                    w: 0.1,
                    h: 0.1,
                })
                .collect(),
        }
    }

    #[test]
    fn counts() {
        assert_eq!(class_counts(&ds(&[0, 0, 1])), vec![2, 1]);
        assert_eq!(class_counts(&ds(&[])), vec![0, 0]);
        assert_eq!(class_counts(&ds(&[1, 0, 0])), vec![2, 1]);
    }

    #[test]
    fn weights_examples() {
        let w = inverse_frequency_weights(&[10, 40]).unwrap();
        assert_eq!(w.weights, vec![2.5, 0.625]);
        assert_eq!(w.weighted_mass(), 50.0);

        let w = inverse_frequency_weights(&[7, 7, 7]).unwrap();
        assert_eq!(w.weights, vec![1.0, 1.0, 1.0]);

        let w = inverse_frequency_weights(&[5, 0]).unwrap();
        assert_eq!(w.weights, vec![0.5, 1.0]);
        assert_eq!(w.zero_count, vec![false, true]);

        assert!(matches!(
            inverse_frequency_weights(&[0, 0]),
            Err(StatsError::AllZeroCounts)
        ));
    }

    proptest! {
        #[test]
        fn weighted_mass_is_conserved(counts in prop::collection::vec(1usize..10_000, 1..12)) {
            let w = inverse_frequency_weights(&counts).unwrap();
            let total = w.total() as f64;
            prop_assert!((w.weighted_mass() - total).abs() <= 1e-9 * total);
        }
    }
}
