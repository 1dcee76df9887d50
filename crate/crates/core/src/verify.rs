//! Exact checks of the reweighting identity on finite probability spaces.
//!
//! With exact ratios, the reweighted source risk
//! `E_S[w_S(c) v(b|c) l]` equals `E_T[(P_S(x|b,c) / P_T(x|b,c)) (1 / P_T(c)) l]`,
//! and when the appearance conditionals coincide the latter collapses to the
//! class-weighted target risk `E_T[l / P_T(c)]`. Everything here is computed
//! by enumeration; no density estimation is involved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::Domain;
use crate::content_stats::Smoothing;

pub const IDENTITY_REPORT_VERSION: u32 = 1;
/// Largest support size per axis drawn by `identity_report`.
pub const MAX_SUPPORT: usize = 4;
/// Lower bound applied to every cell of a random distribution before renormalizing.
pub const CELL_FLOOR: f64 = 1e-3;
const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("expected {expected} cells for shape {shape:?}, got {got}")]
    Shape {
        shape: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("probabilities must be finite and non-negative (cell {0})")]
    Negative(usize),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("loss entries must be finite (cell {0})")]
    NonFinite(usize),
    #[error("distributions have different shapes")]
    ShapeMismatch,
    #[error("target mass at (x={x}, b={b}, c={c}) lies outside the source support")]
    SupportViolation { x: usize, b: usize, c: usize },
    #[error("class {0} has target mass but zero source marginal")]
    ZeroSourceMarginal(usize),
}

/// `P(x, b, c)` on `nx * nb * nc` cells, stored with `c` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJointDistribution {
    pub shape: [usize; 3],
    pub p: Vec<f64>,
    pub domain: Domain,
}

fn index(shape: [usize; 3], x: usize, b: usize, c: usize) -> usize {
    (x * shape[1] + b) * shape[2] + c
}

impl DiscreteJointDistribution {
    pub fn new(shape: [usize; 3], p: Vec<f64>, domain: Domain) -> Result<Self, VerifyError> {
        let expected = shape.iter().product();
        if p.len() != expected {
            return Err(VerifyError::Shape {
                shape,
                expected,
                got: p.len(),
            });
        }
        if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(VerifyError::Negative(i));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(VerifyError::NotNormalized(total));
        }
        Ok(DiscreteJointDistribution { shape, p, domain })
    }

    /// Normalizes positive masses after flooring each cell at `floor`.
    pub fn from_masses(shape: [usize; 3], masses: &[f64], floor: f64, domain: Domain) -> Result<Self, VerifyError> {
        let total: f64 = masses.iter().sum();
        let floored: Vec<f64> = masses.iter().map(|m| (m / total).max(floor)).collect();
        let total: f64 = floored.iter().sum();
        Self::new(shape, floored.iter().map(|m| m / total).collect(), domain)
    }

    pub fn get(&self, x: usize, b: usize, c: usize) -> f64 {
        self.p[index(self.shape, x, b, c)]
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let [nx, nb, nc] = self.shape;
        (0..nx).flat_map(move |x| (0..nb).flat_map(move |b| (0..nc).map(move |c| (x, b, c))))
    }

    pub fn class_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.shape[2]];
        for (x, b, c) in self.cells() {
            out[c] += self.get(x, b, c);
        }
        out
    }

    /// `P(b, c)`, indexed `b * nc + c`.
    pub fn box_class_marginal(&self) -> Vec<f64> {
        let nc = self.shape[2];
        let mut out = vec![0.0; self.shape[1] * nc];
        for (x, b, c) in self.cells() {
            out[b * nc + c] += self.get(x, b, c);
        }
        out
    }

    /// `P(x | b, c)`; zero where `P(b, c) = 0`.
    pub fn appearance_conditional(&self) -> Vec<f64> {
        let bc = self.box_class_marginal();
        let nc = self.shape[2];
        self.cells()
            .map(|(x, b, c)| {
                let m = bc[b * nc + c];
                if m > 0.0 {
                    self.get(x, b, c) / m
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Arbitrary finite loss per cell, same layout as the distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl LossTable {
    pub fn new(shape: [usize; 3], values: Vec<f64>) -> Result<Self, VerifyError> {
        let expected = shape.iter().product();
        if values.len() != expected {
            return Err(VerifyError::Shape {
                shape,
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VerifyError::NonFinite(i));
        }
        Ok(LossTable { shape, values })
    }

    pub fn constant(shape: [usize; 3], value: f64) -> Self {
        LossTable {
            shape,
            values: vec![value; shape.iter().product()],
        }
    }

    pub fn get(&self, x: usize, b: usize, c: usize) -> f64 {
        self.values[index(self.shape, x, b, c)]
    }
}

/// Exact class weights and box ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactWeights {
    pub shape: [usize; 3],
    /// `1 / P_S(c)`; zero for classes with no mass in either domain.
    pub w_source: Vec<f64>,
    /// `P_T(b|c) / P_S(b|c)`, indexed `b * nc + c`; zero where the target has no mass.
    pub v: Vec<f64>,
}

impl ExactWeights {
    pub fn v(&self, b: usize, c: usize) -> f64 {
        self.v[b * self.shape[2] + c]
    }
}

fn check_support(s: &DiscreteJointDistribution, t: &DiscreteJointDistribution) -> Result<(), VerifyError> {
    if s.shape != t.shape {
        return Err(VerifyError::ShapeMismatch);
    }
    for (x, b, c) in t.cells() {
        if t.get(x, b, c) > 0.0 && s.get(x, b, c) <= 0.0 {
            return Err(VerifyError::SupportViolation { x, b, c });
        }
    }
    Ok(())
}

pub fn exact_weights(
    s: &DiscreteJointDistribution,
    t: &DiscreteJointDistribution,
) -> Result<ExactWeights, VerifyError> {
    if s.shape != t.shape {
        return Err(VerifyError::ShapeMismatch);
    }
    let (ps_c, pt_c) = (s.class_marginal(), t.class_marginal());
    let (ps_bc, pt_bc) = (s.box_class_marginal(), t.box_class_marginal());
    let [_, nb, nc] = s.shape;
    let mut w_source = vec![0.0; nc];
    for c in 0..nc {
        if ps_c[c] > 0.0 {
            w_source[c] = 1.0 / ps_c[c];
        } else if pt_c[c] > 0.0 {
            return Err(VerifyError::ZeroSourceMarginal(c));
        }
    }
    let mut v = vec![0.0; nb * nc];
    for b in 0..nb {
        for c in 0..nc {
            let i = b * nc + c;
            if pt_bc[i] == 0.0 {
                continue;
            }
            if ps_bc[i] == 0.0 {
                return Err(VerifyError::SupportViolation { x: 0, b, c });
            }
            v[i] = (pt_bc[i] / pt_c[c]) / (ps_bc[i] / ps_c[c]);
        }
    }
    Ok(ExactWeights {
        shape: s.shape,
        w_source,
        v,
    })
}

/// `sum P_S(x,b,c) w_S(c) v(b|c) l(x,b,c)`.
pub fn lhs_reweighted_source_risk(s: &DiscreteJointDistribution, weights: &ExactWeights, loss: &LossTable) -> f64 {
    s.cells()
        .map(|(x, b, c)| s.get(x, b, c) * weights.w_source[c] * weights.v(b, c) * loss.get(x, b, c))
        .sum()
}

/// `sum P_T(x,b,c) (P_S(x|b,c) / P_T(x|b,c)) (1 / P_T(c)) l(x,b,c)`.
pub fn rhs_target_reference_risk(
    s: &DiscreteJointDistribution,
    t: &DiscreteJointDistribution,
    loss: &LossTable,
) -> Result<f64, VerifyError> {
    check_support(s, t)?;
    let (app_s, app_t) = (s.appearance_conditional(), t.appearance_conditional());
    let pt_c = t.class_marginal();
    Ok(t.cells()
        .enumerate()
        .filter(|&(_, (x, b, c))| t.get(x, b, c) > 0.0)
        .map(|(i, (x, b, c))| t.get(x, b, c) * (app_s[i] / app_t[i]) / pt_c[c] * loss.get(x, b, c))
        .sum())
}

/// `sum P_T(x,b,c) l(x,b,c) / P_T(c)`.
pub fn class_weighted_target_risk(t: &DiscreteJointDistribution, loss: &LossTable) -> f64 {
    let pt_c = t.class_marginal();
    t.cells()
        .filter(|&(x, b, c)| t.get(x, b, c) > 0.0)
        .map(|(x, b, c)| t.get(x, b, c) / pt_c[c] * loss.get(x, b, c))
        .sum()
}

/// Target whose appearance conditionals are copied from `s` while keeping
/// the box/class marginal of `t`.
pub fn with_source_appearance(
    s: &DiscreteJointDistribution,
    t: &DiscreteJointDistribution,
) -> DiscreteJointDistribution {
    let app = s.appearance_conditional();
    let bc = t.box_class_marginal();
    let nc = t.shape[2];
    let p = t
        .cells()
        .enumerate()
        .map(|(i, (_, b, c))| app[i] * bc[b * nc + c])
        .collect();
    DiscreteJointDistribution {
        shape: t.shape,
        p,
        domain: t.domain,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub min_abs: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub version: u32,
    pub trials: usize,
    pub seed: u64,
    pub max_support: [usize; 3],
    /// `max |LHS - RHS|` with exact weights.
    pub max_abs_discrepancy: f64,
    /// `max |LHS - E_T[l / P_T(c)]|` when appearance conditionals are forced equal.
    pub max_abs_discrepancy_equal_appearance: f64,
    /// `|LHS - RHS|` after replacing exact `v` by its bounded smoothed form.
    /// Informational.
    pub smoothed_gap: Option<GapStats>,
}

struct Trial {
    exact: f64,
    equal_appearance: f64,
    smoothed: f64,
}

fn random_dist<R: Rng>(rng: &mut R, shape: [usize; 3], domain: Domain) -> DiscreteJointDistribution {
    let n: usize = shape.iter().product();
    let masses: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    DiscreteJointDistribution::from_masses(shape, &masses, CELL_FLOOR, domain).expect("positive masses")
}

fn run_trial(seed: u64, trial: usize) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let shape = [(); 3].map(|_| rng.random_range(1..=MAX_SUPPORT));
    let s = random_dist(&mut rng, shape, Domain::Source);
    let t = random_dist(&mut rng, shape, Domain::Target);
    let n: usize = shape.iter().product();
    let loss = LossTable::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).expect("finite");

    let w = exact_weights(&s, &t).expect("shared support");
    let lhs = lhs_reweighted_source_risk(&s, &w, &loss);
    let rhs = rhs_target_reference_risk(&s, &t, &loss).expect("shared support");

    let t_eq = with_source_appearance(&s, &t);
    let w_eq = exact_weights(&s, &t_eq).expect("shared support");
    let lhs_eq = lhs_reweighted_source_risk(&s, &w_eq, &loss);

    let smoothing = Smoothing::default();
    let smoothed = ExactWeights {
        v: w.v.iter().map(|&r| smoothing.squash(r)).collect(),
        ..w.clone()
    };
    Trial {
        exact: (lhs - rhs).abs(),
        equal_appearance: (lhs_eq - class_weighted_target_risk(&t_eq, &loss)).abs(),
        smoothed: (lhs_reweighted_source_risk(&s, &smoothed, &loss) - rhs).abs(),
    }
}

/// Draws `trials` random distribution pairs and loss tables and reports the
/// worst violation of the identity. Trial `i` uses stream `i` of the seeded
/// generator, so results are independent of scheduling.
pub fn identity_report(trials: usize, seed: u64) -> IdentityReport {
    let results: Vec<Trial> = (0..trials).into_par_iter().map(|i| run_trial(seed, i)).collect();
    let max = |f: fn(&Trial) -> f64| results.iter().map(f).fold(0.0, f64::max);
    let smoothed_gap = (!results.is_empty()).then(|| GapStats {
        min_abs: results.iter().map(|t| t.smoothed).fold(f64::INFINITY, f64::min),
        mean_abs: results.iter().map(|t| t.smoothed).sum::<f64>() / results.len() as f64,
        max_abs: max(|t| t.smoothed),
    });
    IdentityReport {
        version: IDENTITY_REPORT_VERSION,
        trials,
        seed,
        max_support: [MAX_SUPPORT; 3],
        max_abs_discrepancy: max(|t| t.exact),
        max_abs_discrepancy_equal_appearance: max(|t| t.equal_appearance),
        smoothed_gap,
    }
}
