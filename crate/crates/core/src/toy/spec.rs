use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{BoxAnnotation, DetectionDataset, Domain, ImageInfo};

/// Pixel size of the pseudo-image each toy instance is exported with.
pub const TOY_IMAGE_SIZE: f64 = 1000.0;
const MIN_BOX_SIDE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> SpecError {
    SpecError::Invalid(msg.into())
}

/// Box geometry for one class in one domain: log-normal size, Gaussian center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub log_size_mean: [f64; 2],
    pub log_size_std: [f64; 2],
    pub loc_mean: [f64; 2],
    pub loc_std: [f64; 2],
}

/// Affine map from latent to observed features plus isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceSpec {
    /// `raw_dim` rows of `latent_dim` entries.
    pub matrix: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub class_probs: Vec<f64>,
    /// One entry per class.
    pub boxes: Vec<BoxSpec>,
    pub appearance: AppearanceSpec,
}

/// Generative process for a two-domain toy detection task.
///
/// An instance of class `c` has latent `z = [mu_c + latent_noise * eps, 2 * (box - 0.5)]`
/// (class block followed by the four box coordinates) and observed features
/// `x = A_domain z + b_domain + noise * eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDomainSpec {
    pub classes: Vec<String>,
    /// `K` rows of class-latent means.
    pub class_means: Vec<Vec<f64>>,
    pub latent_noise: f64,
    pub raw_dim: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyInstance {
    pub features: Vec<f64>,
    pub annotation: BoxAnnotation,
    pub domain: Domain,
}

impl ToyDomainSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn latent_dim(&self) -> usize {
        self.class_dim() + 4
    }

    pub fn domain(&self, domain: Domain) -> &DomainSpec {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let k = self.num_classes();
        if k == 0 {
            return Err(invalid("toy spec needs at least one class"));
        }
        if self.class_means.len() != k {
            return Err(invalid(format!(
                "class_means has {} rows for {k} classes",
                self.class_means.len()
            )));
        }
        let cd = self.class_dim();
        if self.class_means.iter().any(|m| m.len() != cd) {
            return Err(invalid("class_means rows differ in length"));
        }
        if !(self.latent_noise > 0.0) {
            return Err(invalid("latent_noise must be > 0"));
        }
        if self.raw_dim == 0 {
            return Err(invalid("raw_dim must be > 0"));
        }
        for (name, d) in [("source", &self.source), ("target", &self.target)] {
            if d.class_probs.len() != k || d.boxes.len() != k {
                return Err(invalid(format!("{name}: class_probs and boxes need {k} entries")));
            }
            if d.class_probs.iter().any(|p| !(*p >= 0.0)) {
                return Err(invalid(format!("{name}: class_probs must be non-negative")));
            }
            let sum: f64 = d.class_probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("{name}: class_probs sum to {sum}, not 1")));
            }
            for b in &d.boxes {
                if b.log_size_std.iter().chain(&b.loc_std).any(|s| !(*s > 0.0)) {
                    return Err(invalid(format!("{name}: box standard deviations must be > 0")));
                }
            }
            let a = &d.appearance;
            if a.matrix.len() != self.raw_dim || a.matrix.iter().any(|r| r.len() != self.latent_dim()) {
                return Err(invalid(format!(
                    "{name}: appearance matrix must be {} x {}",
                    self.raw_dim,
                    self.latent_dim()
                )));
            }
            if a.bias.len() != self.raw_dim {
                return Err(invalid(format!(
                    "{name}: appearance bias must have {} entries",
                    self.raw_dim
                )));
            }
            if !(a.noise > 0.0) {
                return Err(invalid(format!("{name}: appearance noise must be > 0")));
            }
        }
        Ok(())
    }
}

fn sample_box<R: Rng>(spec: &BoxSpec, rng: &mut R) -> [f64; 4] {
    let mut size = [0.0; 2];
    for (d, side) in size.iter_mut().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        *side = (spec.log_size_mean[d] + spec.log_size_std[d] * z)
            .exp()
            .clamp(MIN_BOX_SIDE, 1.0);
    }
    let mut loc = [0.0; 2];
    for d in 0..2 {
        let z: f64 = rng.sample(StandardNormal);
        let half = size[d] / 2.0;
        loc[d] = (spec.loc_mean[d] + spec.loc_std[d] * z).clamp(half, 1.0 - half);
    }
    [loc[0], loc[1], size[0], size[1]]
}

/// Draws `n` i.i.d. instances of one domain.
pub fn generate_domain(
    spec: &ToyDomainSpec,
    domain: Domain,
    n: usize,
    seed: u64,
) -> Result<Vec<ToyInstance>, SpecError> {
    spec.validate()?;
    let dom = spec.domain(domain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = WeightedIndex::new(&dom.class_probs).map_err(|e| invalid(format!("class_probs: {e}")))?;
    let latent_noise = Normal::new(0.0, spec.latent_noise).expect("validated");
    let obs_noise = Normal::new(0.0, dom.appearance.noise).expect("validated");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let c = classes.sample(&mut rng);
        let [cx, cy, w, h] = sample_box(&dom.boxes[c], &mut rng);
        let mut latent: Vec<f64> = spec.class_means[c]
            .iter()
            .map(|m| m + latent_noise.sample(&mut rng))
            .collect();
        latent.extend([cx, cy, w, h].iter().map(|v| 2.0 * (v - 0.5)));
        let features = dom
            .appearance
            .matrix
            .iter()
            .zip(&dom.appearance.bias)
            .map(|(row, b)| row.iter().zip(&latent).map(|(a, z)| a * z).sum::<f64>() + b + obs_noise.sample(&mut rng))
            .collect();
        out.push(ToyInstance {
            features,
            annotation: BoxAnnotation {
                image_id: format!("{domain}-{i}"),
                class_id: c,
                cx,
                cy,
                w,
                h,
            },
            domain,
        });
    }
    Ok(out)
}

/// Wraps instances as an annotation dataset, one pseudo-image per instance.
pub fn to_dataset(instances: &[ToyInstance], classes: &[String], domain: Domain) -> DetectionDataset {
    DetectionDataset {
        domain,
        classes: classes.to_vec(),
        category_ids: None,
        images: instances
            .iter()
            .map(|inst| ImageInfo {
                id: inst.annotation.image_id.clone(),
                width: TOY_IMAGE_SIZE,
                height: TOY_IMAGE_SIZE,
            })
            .collect(),
        annotations: instances.iter().map(|inst| inst.annotation.clone()).collect(),
    }
}

/// Feature sidecar: `image_id,f0,f1,...`.
pub fn write_features_csv<W: Write>(instances: &[ToyInstance], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let dim = instances.first().map_or(0, |i| i.features.len());
    let mut header = vec!["image_id".to_string()];
    header.extend((0..dim).map(|d| format!("f{d}")));
    writer.write_record(&header)?;
    for inst in instances {
        let mut rec = vec![inst.annotation.image_id.clone()];
        rec.extend(inst.features.iter().map(|f| f.to_string()));
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::validate;
    use crate::toy::fixtures;

    #[test]
    fn degenerate_simplex_gives_single_class() {
        let mut spec = fixtures::imbalanced_shift();
        let k = spec.num_classes();
        spec.source.class_probs = (0..k).map(|c| if c == 0 { 1.0 } else { 0.0 }).collect();
        let inst = generate_domain(&spec, Domain::Source, 200, 1).unwrap();
        assert!(inst.iter().all(|i| i.annotation.class_id == 0));
    }

    #[test]
    fn empty_and_deterministic() {
        let spec = fixtures::imbalanced_shift();
        assert!(generate_domain(&spec, Domain::Target, 0, 1).unwrap().is_empty());
        let a = generate_domain(&spec, Domain::Target, 50, 9).unwrap();
        let b = generate_domain(&spec, Domain::Target, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_domain(&spec, Domain::Target, 50, 10).unwrap());
    }

    #[test]
    fn identical_domain_halves_have_matching_class_frequencies() {
        let mut spec = fixtures::imbalanced_shift();
        spec.target = spec.source.clone();
        let n = 4000;
        let s = generate_domain(&spec, Domain::Source, n, 100).unwrap();
        let t = generate_domain(&spec, Domain::Target, n, 200).unwrap();
        for (c, &p) in spec.source.class_probs.iter().enumerate() {
            let fs = s.iter().filter(|i| i.annotation.class_id == c).count() as f64 / n as f64;
            let ft = t.iter().filter(|i| i.annotation.class_id == c).count() as f64 / n as f64;
            // difference of two independent binomial proportions
            let sd = (2.0 * p * (1.0 - p) / n as f64).sqrt();
            assert!((fs - ft).abs() <= 3.0 * sd, "class {c}: {fs} vs {ft}");
        }
    }

    #[test]
    fn generated_boxes_are_valid() {
        let spec = fixtures::imbalanced_shift();
        let inst = generate_domain(&spec, Domain::Source, 500, 3).unwrap();
        let ds = to_dataset(&inst, &spec.classes, Domain::Source);
        assert!(validate(&ds).is_empty(), "{:?}", validate(&ds));
        assert!(inst
            .iter()
            .all(|i| i.features.len() == spec.raw_dim && i.features.iter().all(|f| f.is_finite())));
    }

    #[test]
    fn validation_catches_bad_simplex() {
        let mut spec = fixtures::imbalanced_shift();
        spec.target.class_probs[0] += 0.5;
        assert!(spec.validate().is_err());
    }
}
