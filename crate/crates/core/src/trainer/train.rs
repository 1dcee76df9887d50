use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{CareConfig, ConfigError, DataConfig, Method, Resolved};
use crate::annotations::{subsample, Domain};
use crate::content_stats::{class_counts, fit_box_ratio_model, inverse_frequency_weights, BoxRatioModel, ClassWeights};
use crate::toy::{
    argmax, box_loss, det_loss, generate_domain, model_gradients, objective, to_dataset, AlignmentTerm, ModelShape,
    ObjectiveBreakdown, ToyDomainSpec, ToyInstance, ToyModel, WeightedInstance,
};

pub const TRAIN_REPORT_VERSION: u32 = 1;

/// Generated splits. The target test split is drawn from its own stream and
/// never touches statistics fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub classes: Vec<String>,
    pub source_train: Vec<ToyInstance>,
    pub target_train: Vec<ToyInstance>,
    pub target_test: Vec<ToyInstance>,
    pub target_fraction: f64,
}

impl TrainData {
    pub fn raw_dim(&self) -> usize {
        self.source_train
            .iter()
            .chain(&self.target_train)
            .chain(&self.target_test)
            .next()
            .map_or(0, |i| i.features.len())
    }
}

pub fn prepare_data(spec: &ToyDomainSpec, cfg: &DataConfig) -> Result<TrainData, ConfigError> {
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (s_seed, t_seed, test_seed, sub_seed) =
        (seeds.next_u64(), seeds.next_u64(), seeds.next_u64(), seeds.next_u64());
    let source_train = generate_domain(spec, Domain::Source, cfg.source_train, s_seed)?;
    let mut target_train = generate_domain(spec, Domain::Target, cfg.target_train, t_seed)?;
    let target_test = generate_domain(spec, Domain::Target, cfg.target_test, test_seed)?;
    if cfg.target_fraction < 1.0 || !(cfg.target_fraction > 0.0) {
        let ds = to_dataset(&target_train, &spec.classes, Domain::Target);
        let kept = subsample(&ds, cfg.target_fraction, sub_seed)?;
        let ids: HashSet<String> = kept.images.into_iter().map(|im| im.id).collect();
        target_train.retain(|i| ids.contains(&i.annotation.image_id));
    }
    Ok(TrainData {
        classes: spec.classes.clone(),
        source_train,
        target_train,
        target_test,
        target_fraction: cfg.target_fraction,
    })
}

/// Per-annotation loss multipliers, fitted on the training splits only.
#[derive(Debug, Clone)]
pub struct CareWeights {
    pub source_class: Option<ClassWeights>,
    pub target_class: Option<ClassWeights>,
    pub box_model: Option<BoxRatioModel>,
}

fn split_class_weights(instances: &[ToyInstance], classes: &[String], domain: Domain) -> Option<ClassWeights> {
    let counts = class_counts(&to_dataset(instances, classes, domain));
    inverse_frequency_weights(&counts).ok()
}

impl CareWeights {
    pub fn unit() -> Self {
        CareWeights {
            source_class: None,
            target_class: None,
            box_model: None,
        }
    }

    pub fn fit(data: &TrainData, resolved: &Resolved) -> Result<Self, ConfigError> {
        let mut w = CareWeights::unit();
        if resolved.use_class_rewt {
            w.source_class = split_class_weights(&data.source_train, &data.classes, Domain::Source);
            w.target_class = split_class_weights(&data.target_train, &data.classes, Domain::Target);
        }
        if resolved.use_box_rewt {
            let s = to_dataset(&data.source_train, &data.classes, Domain::Source);
            let t = to_dataset(&data.target_train, &data.classes, Domain::Target);
            w.box_model = Some(fit_box_ratio_model(&s, &t)?);
        }
        Ok(w)
    }

    /// `w_S(c) * v(b|c)` for source instances, `w_T(c)` for target ones.
    pub fn weight(&self, inst: &ToyInstance) -> f64 {
        let c = inst.annotation.class_id;
        match inst.domain {
            Domain::Source => {
                let wc = self.source_class.as_ref().map_or(1.0, |w| w.get(c));
                let v = self.box_model.as_ref().map_or(1.0, |m| m.weight(&inst.annotation));
                wc * v
            }
            Domain::Target => self.target_class.as_ref().map_or(1.0, |w| w.get(c)),
        }
    }
}

/// The weighted three-term objective on one source and one target batch.
pub fn care_objective(
    model: &ToyModel,
    source: &[&ToyInstance],
    target: &[&ToyInstance],
    weights: &CareWeights,
    lambda: f64,
    alignment: AlignmentTerm,
) -> (f64, ObjectiveBreakdown) {
    let batch: Vec<WeightedInstance> = source
        .iter()
        .chain(target)
        .map(|inst| WeightedInstance {
            instance: inst,
            weight: weights.weight(inst),
        })
        .collect();
    let out = objective(model, &batch, lambda, alignment);
    (out.total, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub source_det: f64,
    pub target_det: f64,
    pub alignment: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Mean over classes present in the test split.
    pub balanced_accuracy: f64,
    /// `None` for classes absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_box_l1: f64,
    pub target_risk: f64,
    /// Detection loss scaled by inverse target-train class frequency.
    pub target_risk_class_weighted: f64,
}

/// Target metrics of `model` on `test`.
pub fn evaluate(model: &ToyModel, test: &[ToyInstance], target_class: &ClassWeights) -> Metrics {
    let k = model.shape().num_classes;
    let mut hits = vec![0usize; k];
    let mut support = vec![0usize; k];
    let (mut box_sum, mut risk, mut weighted_risk) = (0.0, 0.0, 0.0);
    for inst in test {
        let f = model.forward(&inst.features);
        let c = inst.annotation.class_id;
        support[c] += 1;
        if argmax(f.logits.view()) == c {
            hits[c] += 1;
        }
        let target = inst.annotation.as_array();
        box_sum += box_loss(f.pred_box.view(), target);
        let l = det_loss(f.logits.view(), f.pred_box.view(), target, c);
        risk += l;
        weighted_risk += target_class.get(c) * l;
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&support)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let n = test.len().max(1) as f64;
    Metrics {
        overall_accuracy: hits.iter().sum::<usize>() as f64 / n,
        balanced_accuracy: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        per_class_accuracy: per_class,
        mean_box_l1: box_sum / n,
        target_risk: risk / n,
        target_risk_class_weighted: weighted_risk / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub target_fraction: f64,
    /// Always "train": weights and densities never see the test split.
    pub statistics_fit_on: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub seed: u64,
    pub config: CareConfig,
    pub resolved: Resolved,
    pub data: DataSummary,
    pub source_class_weights: Option<Vec<f64>>,
    pub target_class_weights: Option<Vec<f64>>,
    pub history: Vec<StepLoss>,
    pub metrics: Metrics,
    pub params_sha256: String,
    pub wall_time_secs: f64,
}

/// SGD with momentum over seeded batches. One `step` call is one update.
pub struct Trainer<'a> {
    config: CareConfig,
    resolved: Resolved,
    data: &'a TrainData,
    source_weights: Vec<f64>,
    target_weights: Vec<f64>,
    weights: CareWeights,
    model: ToyModel,
    velocity: Vec<f64>,
    rng: ChaCha8Rng,
    step: usize,
    history: Vec<StepLoss>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &CareConfig, data: &'a TrainData) -> Result<Self, ConfigError> {
        let resolved = config.resolve()?;
        let weights = CareWeights::fit(data, &resolved)?;
        Self::with_weights(config, data, weights)
    }

    /// Uses caller-supplied weights instead of fitting them.
    pub fn with_weights(config: &CareConfig, data: &'a TrainData, weights: CareWeights) -> Result<Self, ConfigError> {
        let resolved = config.resolve()?;
        let uses_source = resolved.method != Method::TargetOnly;
        let uses_target = resolved.method != Method::SourceOnly;
        if uses_source && data.source_train.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "{} needs source training data",
                resolved.method.name()
            )));
        }
        if uses_target && data.target_train.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "{} needs target training data",
                resolved.method.name()
            )));
        }
        let shape = ModelShape {
            raw_dim: data.raw_dim(),
            hidden: config.hidden,
            embed_dim: config.embed_dim,
            num_classes: data.classes.len(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ToyModel::init(shape, rng.next_u64());
        let source_weights = data.source_train.iter().map(|i| weights.weight(i)).collect();
        let target_weights = data.target_train.iter().map(|i| weights.weight(i)).collect();
        Ok(Trainer {
            config: config.clone(),
            resolved,
            data,
            source_weights,
            target_weights,
            weights,
            velocity: vec![0.0; model.params().len()],
            model,
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn weights(&self) -> &CareWeights {
        &self.weights
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn seq_switch(&self) -> usize {
        self.config.steps / 2
    }

    /// Source and target rows in the batch for the current step.
    fn split(&self) -> (usize, usize) {
        let b = self.config.batch_size;
        match self.resolved.method {
            Method::SourceOnly => (b, 0),
            Method::TargetOnly => (0, b),
            Method::SeqFt if self.step < self.seq_switch() => (b, 0),
            Method::SeqFt => (0, b),
            _ => {
                let ns = ((b as f64 * self.config.source_ratio).round() as usize).clamp(1, b - 1);
                (ns, b - ns)
            }
        }
    }

    pub fn step(&mut self) -> ObjectiveBreakdown {
        if self.resolved.method == Method::SeqFt && self.step == self.seq_switch() {
            self.velocity.iter_mut().for_each(|v| *v = 0.0);
        }
        let (ns, nt) = self.split();
        let mut batch = Vec::with_capacity(ns + nt);
        for _ in 0..ns {
            let i = self.rng.random_range(0..self.data.source_train.len());
            batch.push(WeightedInstance {
                instance: &self.data.source_train[i],
                weight: self.source_weights[i],
            });
        }
        for _ in 0..nt {
            let i = self.rng.random_range(0..self.data.target_train.len());
            batch.push(WeightedInstance {
                instance: &self.data.target_train[i],
                weight: self.target_weights[i],
            });
        }
        let alignment = AlignmentTerm {
            kind: self.resolved.alignment,
            options: self.config.alignment_options,
        };
        let (out, grads) = model_gradients(&self.model, &batch, self.config.lambda, alignment);
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        for ((p, v), g) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(grads.params())
        {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        if self.step.is_multiple_of(self.config.log_every) {
            self.history.push(StepLoss {
                step: self.step,
                source_det: out.source_det,
                target_det: out.target_det,
                alignment: out.alignment,
                total: out.total,
            });
        }
        self.step += 1;
        out
    }

    /// Runs the remaining steps and evaluates on the target test split.
    pub fn finish(mut self, started: Instant) -> (TrainReport, ToyModel) {
        while self.step < self.config.steps {
            self.step();
        }
        let eval_weights = split_class_weights(&self.data.target_train, &self.data.classes, Domain::Target)
            .unwrap_or_else(|| ClassWeights::uniform(self.data.classes.len()));
        let metrics = evaluate(&self.model, &self.data.target_test, &eval_weights);
        let mut hasher = Sha256::new();
        for p in self.model.params() {
            hasher.update(p.to_le_bytes());
        }
        let report = TrainReport {
            version: TRAIN_REPORT_VERSION,
            seed: self.config.seed,
            config: self.config.clone(),
            resolved: self.resolved,
            data: DataSummary {
                source_train: self.data.source_train.len(),
                target_train: self.data.target_train.len(),
                target_test: self.data.target_test.len(),
                target_fraction: self.data.target_fraction,
                statistics_fit_on: "train".to_string(),
            },
            source_class_weights: self.weights.source_class.as_ref().map(|w| w.weights.clone()),
            target_class_weights: self.weights.target_class.as_ref().map(|w| w.weights.clone()),
            history: self.history,
            metrics,
            params_sha256: hex::encode(hasher.finalize()),
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        (report, self.model)
    }
}

/// Trains one configuration to completion.
pub fn train(config: &CareConfig, data: &TrainData) -> Result<(TrainReport, ToyModel), ConfigError> {
    let started = Instant::now();
    Ok(Trainer::new(config, data)?.finish(started))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentKind;
    use crate::toy::fixtures;

    fn small_data() -> TrainData {
        let cfg = DataConfig {
            source_train: 400,
            target_train: 120,
            target_test: 200,
            target_fraction: 1.0,
            seed: 3,
        };
        prepare_data(&fixtures::imbalanced_shift(), &cfg).unwrap()
    }

    fn cfg(method: Method, steps: usize) -> CareConfig {
        CareConfig {
            method,
            steps,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn care_with_unit_weights_and_no_lambda_tracks_mixing() {
        let data = small_data();
        let mixing = cfg(Method::Mixing, 60);
        let care = CareConfig {
            lambda: 0.0,
            ..cfg(Method::Care, 60)
        };
        let mut a = Trainer::new(&mixing, &data).unwrap();
        let mut b = Trainer::with_weights(&care, &data, CareWeights::unit()).unwrap();
        for _ in 0..60 {
            a.step();
            b.step();
            let worst = a
                .model()
                .params()
                .iter()
                .zip(b.model().params())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1e-12, "step {}: {worst}", a.steps_done());
        }
    }

    #[test]
    fn seq_ft_switch_matches_source_only() {
        let data = small_data();
        let mut seq = Trainer::new(&cfg(Method::SeqFt, 40), &data).unwrap();
        for _ in 0..20 {
            seq.step();
        }
        let (_, pure) = train(&cfg(Method::SourceOnly, 20), &data).unwrap();
        assert_eq!(seq.model().params(), pure.params());
    }

    #[test]
    fn deterministic_apart_from_wall_time() {
        let data = small_data();
        let c = cfg(Method::Care, 30);
        let (mut a, _) = train(&c, &data).unwrap();
        let (mut b, _) = train(&c, &data).unwrap();
        a.wall_time_secs = 0.0;
        b.wall_time_secs = 0.0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn breakdown_is_additive_and_empty_target_zeroes_terms() {
        let data = small_data();
        let model = ToyModel::init(
            ModelShape {
                raw_dim: data.raw_dim(),
                hidden: 8,
                embed_dim: 4,
                num_classes: 4,
            },
            5,
        );
        let resolved = CareConfig::default().resolve().unwrap();
        let weights = CareWeights::fit(&data, &resolved).unwrap();
        let src: Vec<&ToyInstance> = data.source_train.iter().take(24).collect();
        let tgt: Vec<&ToyInstance> = data.target_train.iter().take(24).collect();
        let term = AlignmentTerm {
            kind: AlignmentKind::Cycle,
            ..Default::default()
        };
        let (total, b) = care_objective(&model, &src, &tgt, &weights, 0.1, term);
        assert!(b.alignment > 0.0);
        assert!((b.source_det + b.target_det + 0.1 * b.alignment - total).abs() < 1e-12);
        let (_, b) = care_objective(&model, &src, &[], &weights, 0.1, term);
        assert_eq!((b.target_det, b.alignment), (0.0, 0.0));
    }

    #[test]
    fn class_weighted_mass_is_balanced() {
        // Zero model: every instance has the same cross-entropy, so the
        // weighted loss mass of a class is w(c) * N(c) * ln K.
        let data = small_data();
        let resolved = CareConfig {
            use_box_rewt: Some(false),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        let weights = CareWeights::fit(&data, &resolved).unwrap();
        let model = ToyModel::zeros(ModelShape {
            raw_dim: data.raw_dim(),
            hidden: 4,
            embed_dim: 4,
            num_classes: 4,
        });
        let mut mass = [0.0; 4];
        for inst in &data.source_train {
            let f = model.forward(&inst.features);
            let ce = det_loss(
                f.logits.view(),
                f.pred_box.view(),
                inst.annotation.as_array(),
                inst.annotation.class_id,
            ) - box_loss(f.pred_box.view(), inst.annotation.as_array());
            mass[inst.annotation.class_id] += weights.weight(inst) * ce;
        }
        let mean = mass.iter().sum::<f64>() / 4.0;
        for m in mass {
            assert!((m - mean).abs() / mean < 0.02, "{mass:?}");
        }
    }

    #[test]
    fn metrics_are_consistent() {
        let data = small_data();
        let (report, _) = train(&cfg(Method::Mixing, 50), &data).unwrap();
        let m = &report.metrics;
        let present: Vec<f64> = m.per_class_accuracy.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        assert!((m.balanced_accuracy - mean).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&m.overall_accuracy) && (0.0..=1.0).contains(&m.balanced_accuracy));
        assert_eq!(report.history.len(), 50);
        assert_eq!(report.data.statistics_fit_on, "train");
    }

    #[test]
    fn target_fraction_subsamples_train_only() {
        let spec = fixtures::imbalanced_shift();
        let full = DataConfig {
            source_train: 50,
            target_train: 100,
            target_test: 80,
            target_fraction: 1.0,
            seed: 1,
        };
        let half = DataConfig {
            target_fraction: 0.25,
            ..full.clone()
        };
        let a = prepare_data(&spec, &full).unwrap();
        let b = prepare_data(&spec, &half).unwrap();
        assert_eq!(b.target_train.len(), 25);
        assert_eq!(a.target_test, b.target_test);
        assert!(b.target_train.iter().all(|i| a.target_train.contains(i)));
    }
}
