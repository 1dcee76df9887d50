use serde::{Deserialize, Serialize};

use super::kde::{Kde2, MIN_BANDWIDTH};
use super::StatsError;
use crate::annotations::{BoxAnnotation, DetectionDataset};

/// One KDE per class; `None` where the class has no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalKde {
    pub per_class: Vec<Option<Kde2>>,
}

impl ConditionalKde {
    pub fn fit(per_class_points: &[Vec<[f64; 2]>], min_bandwidth: f64) -> Self {
        let per_class = per_class_points
            .iter()
            .map(|pts| Kde2::fit(pts, min_bandwidth).ok())
            .collect();
        ConditionalKde { per_class }
    }

    pub fn class(&self, c: usize) -> Option<&Kde2> {
        self.per_class.get(c).and_then(Option::as_ref)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_class.iter().map(|k| k.as_ref().map_or(0, Kde2::len)).collect()
    }
}

/// Maps a raw ratio `r` to `alpha * sigmoid(r) + beta` where the target
/// density exceeds `tau`, and to `floor` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub floor: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing {
            alpha: 20.0,
            beta: -9.0,
            tau: 0.1,
            floor: 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Smoothing {
    /// Supremum of the smoothed value, `alpha + beta`.
    pub fn upper(&self) -> f64 {
        self.alpha + self.beta
    }

    /// `alpha * sigmoid(r) + beta`, kept strictly below `alpha + beta`.
    ///
    /// For `r` beyond ~37 the sigmoid rounds to exactly 1.0, so the result is
    /// capped at the largest double below the supremum.
    pub fn squash(&self, r: f64) -> f64 {
        let v = self.alpha * sigmoid(r) + self.beta;
        let upper = self.upper();
        if v >= upper {
            upper.next_down()
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Smoothed,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioOutcome {
    Smoothed,
    Raw,
    /// Target density at or below `tau`; weight is the floor value.
    BelowThreshold,
    /// Class missing from one domain; weight is the floor value.
    FlaggedClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxWeight {
    pub v: f64,
    pub raw: Option<f64>,
    pub target_density: Option<f64>,
    pub outcome: RatioOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRatioModel {
    pub size_source: ConditionalKde,
    pub size_target: ConditionalKde,
    pub loc_source: ConditionalKde,
    pub loc_target: ConditionalKde,
    pub smoothing: Smoothing,
}

fn per_class_points(ds: &DetectionDataset, f: impl Fn(&BoxAnnotation) -> [f64; 2]) -> Vec<Vec<[f64; 2]>> {
    let mut out = vec![Vec::new(); ds.num_classes()];
    for a in &ds.annotations {
        if let Some(v) = out.get_mut(a.class_id) {
            v.push(f(a));
        }
    }
    out
}

/// Fits the four class-conditional KDEs (size and location, per domain).
pub fn fit_box_ratio_model(source: &DetectionDataset, target: &DetectionDataset) -> Result<BoxRatioModel, StatsError> {
    BoxRatioModel::fit(source, target, Smoothing::default(), MIN_BANDWIDTH)
}

impl BoxRatioModel {
    pub fn fit(
        source: &DetectionDataset,
        target: &DetectionDataset,
        smoothing: Smoothing,
        min_bandwidth: f64,
    ) -> Result<Self, StatsError> {
        if source.classes != target.classes {
            return Err(StatsError::ClassMismatch {
                source_k: source.num_classes(),
                target_k: target.num_classes(),
            });
        }
        Ok(BoxRatioModel {
            size_source: ConditionalKde::fit(&per_class_points(source, BoxAnnotation::size), min_bandwidth),
            size_target: ConditionalKde::fit(&per_class_points(target, BoxAnnotation::size), min_bandwidth),
            loc_source: ConditionalKde::fit(&per_class_points(source, BoxAnnotation::location), min_bandwidth),
            loc_target: ConditionalKde::fit(&per_class_points(target, BoxAnnotation::location), min_bandwidth),
            smoothing,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.size_source.per_class.len()
    }

    /// True where a class lacks samples in either domain.
    pub fn flagged(&self, class_id: usize) -> bool {
        self.size_source.class(class_id).is_none() || self.size_target.class(class_id).is_none()
    }

    pub fn flagged_classes(&self) -> Vec<bool> {
        (0..self.num_classes()).map(|c| self.flagged(c)).collect()
    }

    /// `log P_T(w,h|c) - log P_S(w,h|c) + log P_T(x,y|c) - log P_S(x,y|c)`.
    pub fn raw_log_ratio(&self, b: &BoxAnnotation) -> Option<f64> {
        let c = b.class_id;
        let (ss, st) = (self.size_source.class(c)?, self.size_target.class(c)?);
        let (ls, lt) = (self.loc_source.class(c)?, self.loc_target.class(c)?);
        let size = st.log_pdf(b.size()) - ss.log_pdf(b.size());
        let loc = lt.log_pdf(b.location()) - ls.log_pdf(b.location());
        Some(size + loc)
    }

    pub fn raw_ratio(&self, b: &BoxAnnotation) -> Option<f64> {
        self.raw_log_ratio(b).map(f64::exp)
    }

    /// `P_T(w,h|c) * P_T(x,y|c)`, the quantity compared against `tau`.
    pub fn target_density(&self, b: &BoxAnnotation) -> Option<f64> {
        let c = b.class_id;
        let st = self.size_target.class(c)?;
        let lt = self.loc_target.class(c)?;
        Some((st.log_pdf(b.size()) + lt.log_pdf(b.location())).exp())
    }

    pub fn box_ratio(&self, b: &BoxAnnotation, mode: WeightMode) -> BoxWeight {
        let floor = self.smoothing.floor;
        let (Some(r), Some(density)) = (self.raw_ratio(b), self.target_density(b)) else {
            return BoxWeight {
                v: floor,
                raw: None,
                target_density: None,
                outcome: RatioOutcome::FlaggedClass,
            };
        };
        let (v, outcome) = match mode {
            WeightMode::Raw => (r, RatioOutcome::Raw),
            WeightMode::Smoothed if density > self.smoothing.tau => (self.smoothing.squash(r), RatioOutcome::Smoothed),
            WeightMode::Smoothed => (floor, RatioOutcome::BelowThreshold),
        };
        BoxWeight {
            v,
            raw: Some(r),
            target_density: Some(density),
            outcome,
        }
    }

    /// Smoothed `v(B|C)`.
    pub fn weight(&self, b: &BoxAnnotation) -> f64 {
        self.box_ratio(b, WeightMode::Smoothed).v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{Domain, ImageInfo};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(domain: Domain, n: usize, seed: u64, size_shift: f64) -> DetectionDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let annotations = (0..n)
            .map(|i| {
                let w = (0.05 + size_shift + rng.random::<f64>() * 0.2).min(0.9);
                let h = (0.05 + rng.random::<f64>() * 0.2).min(0.9);
                BoxAnnotation {
                    image_id: "0".into(),
                    class_id: i % 2,
                    cx: 0.5 + (rng.random::<f64>() - 0.5) * (1.0 - w),
                    cy: 0.5 + (rng.random::<f64>() - 0.5) * (1.0 - h),
                    w,
                    h,
                }
            })
            .collect();
        DetectionDataset {
            domain,
            classes: vec!["car".into(), "bus".into()],
            category_ids: None,
            images: vec![ImageInfo {
                id: "0".into(),
                width: 100.0,
                height: 100.0,
            }],
            annotations,
        }
    }

    #[test]
    fn smoothing_at_reference_ratios() {
        let s = Smoothing::default();
        let expected = 20.0 / (1.0 + (-1.0f64).exp()) - 9.0;
        assert!((s.squash(1.0) - 5.621_171_572_600_097).abs() < 1e-12);
        assert!((s.squash(1.0) - expected).abs() < 1e-15);
        assert_eq!(s.squash(0.0), 1.0);
        assert!(s.squash(1e6) < 11.0);
    }

    #[test]
    fn identical_datasets_give_unit_ratio() {
        let src = random_dataset(Domain::Source, 60, 1, 0.0);
        let mut tgt = src.clone();
        tgt.domain = Domain::Target;
        let model = fit_box_ratio_model(&src, &tgt).unwrap();
        for a in &src.annotations {
            assert_eq!(model.raw_ratio(a), Some(1.0));
            let bw = model.box_ratio(a, WeightMode::Smoothed);
            match bw.outcome {
                RatioOutcome::Smoothed => assert!((bw.v - 5.621_171_572_600_097).abs() < 1e-12),
                RatioOutcome::BelowThreshold => assert_eq!(bw.v, 1.0),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn class_missing_from_target_is_flagged() {
        let src = random_dataset(Domain::Source, 40, 2, 0.0);
        let mut tgt = random_dataset(Domain::Target, 40, 3, 0.0);
        tgt.annotations.retain(|a| a.class_id == 0);
        let model = fit_box_ratio_model(&src, &tgt).unwrap();
        assert_eq!(model.flagged_classes(), vec![false, true]);
        let bus = src.annotations.iter().find(|a| a.class_id == 1).unwrap();
        let w = model.box_ratio(bus, WeightMode::Smoothed);
        assert_eq!(w.v, 1.0);
        assert_eq!(w.outcome, RatioOutcome::FlaggedClass);
    }

    #[test]
    fn low_target_density_uses_floor() {
        let src = random_dataset(Domain::Source, 40, 4, 0.0);
        let tgt = random_dataset(Domain::Target, 40, 5, 0.0);
        let model = fit_box_ratio_model(&src, &tgt).unwrap();
        // Far outside the target support: the density is ~0 whatever r is.
        let b = BoxAnnotation {
            image_id: "0".into(),
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        };
        let w = model.box_ratio(&b, WeightMode::Smoothed);
        assert_eq!(w.outcome, RatioOutcome::BelowThreshold);
        assert_eq!(w.v, 1.0);
    }

    #[test]
    fn raw_mode_returns_ratio() {
        let src = random_dataset(Domain::Source, 50, 6, 0.0);
        let tgt = random_dataset(Domain::Target, 50, 7, 0.1);
        let model = fit_box_ratio_model(&src, &tgt).unwrap();
        let a = &tgt.annotations[0];
        let w = model.box_ratio(a, WeightMode::Raw);
        assert_eq!(Some(w.v), model.raw_ratio(a));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn smoothed_weights_bounded_and_swap_inverts(seed in 0u64..1000, shift in 0.0f64..0.3) {
            let src = random_dataset(Domain::Source, 30, seed, 0.0);
            let tgt = random_dataset(Domain::Target, 30, seed + 1, shift);
            let fwd = fit_box_ratio_model(&src, &tgt).unwrap();
            let bwd = fit_box_ratio_model(&tgt, &src).unwrap();
            for a in src.annotations.iter().chain(&tgt.annotations) {
                let v = fwd.weight(a);
                prop_assert!((1.0..11.0).contains(&v));
                let lf = fwd.raw_log_ratio(a).unwrap();
                let lb = bwd.raw_log_ratio(a).unwrap();
                prop_assert!((lf + lb).abs() <= 1e-9 * lf.abs().max(1.0));
                let (rf, rb) = (fwd.raw_ratio(a).unwrap(), bwd.raw_ratio(a).unwrap());
                if rf.is_finite() && rb.is_finite() && rf > 0.0 && rb > 0.0 {
                    prop_assert!((rf * rb - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
