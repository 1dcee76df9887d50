//! Built-in toy task specifications.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::spec::{AppearanceSpec, BoxSpec, DomainSpec, ToyDomainSpec};

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| round2(scale * rng.sample::<f64, _>(StandardNormal)))
                .collect()
        })
        .collect()
}

fn boxes(size: [(f64, f64); 4], loc: [(f64, f64); 4]) -> Vec<BoxSpec> {
    size.iter()
        .zip(&loc)
        .map(|(&(ls, ss), &(ly, sy))| BoxSpec {
            log_size_mean: [ls, round2(ls - 0.2)],
            log_size_std: [ss, ss],
            loc_mean: [0.5, ly],
            loc_std: [0.2, sy],
        })
        .collect()
}

/// Four classes with both gaps present.
///
/// The source is close to balanced while the target is dominated by its
/// first class. The target appearance map is a perturbed copy of the source
/// one plus an offset, and target boxes are larger and sit lower in the frame.
pub fn imbalanced_shift() -> ToyDomainSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(20_231_006);
    let class_dim = 4;
    let raw_dim = 8;
    let latent_dim = class_dim + 4;
    let class_means = vec![
        vec![1.0, 1.0, 0.0, 0.0],
        vec![-1.0, 1.0, 0.0, 0.0],
        vec![0.0, -1.0, 1.0, 0.0],
        vec![0.0, -1.0, -1.0, 0.5],
    ];
    let source_matrix = gaussian_matrix(&mut rng, raw_dim, latent_dim, 0.7);
    let perturb = gaussian_matrix(&mut rng, raw_dim, latent_dim, 0.6);
    let target_matrix = source_matrix
        .iter()
        .zip(&perturb)
        .map(|(r, p)| r.iter().zip(p).map(|(a, b)| round2(a + b)).collect())
        .collect();
    let target_bias = (0..raw_dim)
        .map(|_| round2(0.8 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    ToyDomainSpec {
        classes: ["car", "person", "truck", "bus"].map(String::from).to_vec(),
        class_means,
        latent_noise: 0.6,
        raw_dim,
        source: DomainSpec {
            class_probs: vec![0.4, 0.3, 0.15, 0.15],
            boxes: boxes(
                [(-2.6, 0.35), (-3.0, 0.3), (-2.2, 0.35), (-2.0, 0.3)],
                [(0.55, 0.1), (0.6, 0.1), (0.5, 0.1), (0.5, 0.1)],
            ),
            appearance: AppearanceSpec {
                matrix: source_matrix,
                bias: vec![0.0; raw_dim],
                noise: 0.3,
            },
        },
        target: DomainSpec {
            class_probs: vec![0.7, 0.18, 0.08, 0.04],
            boxes: boxes(
                [(-2.2, 0.45), (-2.9, 0.3), (-1.9, 0.4), (-1.7, 0.35)],
                [(0.62, 0.08), (0.65, 0.08), (0.6, 0.08), (0.58, 0.08)],
            ),
            appearance: AppearanceSpec {
                matrix: target_matrix,
                bias: target_bias,
                noise: 0.3,
            },
        },
    }
}
