//! Class-conditional cross-domain feature alignment.
//!
//! The cycle-consistency loss anchors on a source instance, soft-matches it
//! into the same-class target features, scores the soft match back against
//! every source instance and asks the anchor to win that softmax. The linear
//! MMD baseline matches per-class feature means.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("soft matching needs at least one target feature")]
    EmptyTargets,
    #[error("score row has {scores} entries for {targets} targets")]
    ScoreLength { scores: usize, targets: usize },
    #[error("both sides need at least one feature")]
    EmptySide,
}

/// `S[i][j] = -||f_S^i - f_T^j||^2`.
pub fn pairwise_neg_sqdist(source: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Array2<f64>, AlignmentError> {
    if source.ncols() != target.ncols() {
        return Err(AlignmentError::DimensionMismatch(source.ncols(), target.ncols()));
    }
    let mut out = Array2::zeros((source.nrows(), target.nrows()));
    for (i, fs) in source.outer_iter().enumerate() {
        for (j, ft) in target.outer_iter().enumerate() {
            out[[i, j]] = -sqdist(fs, ft);
        }
    }
    Ok(out)
}

fn sqdist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Max-subtracted softmax.
pub fn softmax(scores: ArrayView1<f64>) -> Array1<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = scores.mapv(|s| (s - max).exp());
    let z = e.sum();
    e /= z;
    e
}

fn log_softmax_at(scores: ArrayView1<f64>, idx: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    scores[idx] - max - z.ln()
}

/// `sum_m softmax(scores)_m * f_T^m`.
pub fn soft_matching(target: ArrayView2<f64>, scores: ArrayView1<f64>) -> Result<Array1<f64>, AlignmentError> {
    if target.nrows() == 0 {
        return Err(AlignmentError::EmptyTargets);
    }
    if scores.len() != target.nrows() {
        return Err(AlignmentError::ScoreLength {
            scores: scores.len(),
            targets: target.nrows(),
        });
    }
    let alpha = softmax(scores);
    Ok(alpha.dot(&target))
}

/// Cycle-consistency loss for one class, averaged over source anchors, with
/// its gradients with respect to both feature matrices.
///
/// Requires at least two source rows and one target row.
pub fn cycle_consistency_loss(
    source: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), AlignmentError> {
    let d = source.ncols();
    if d != target.ncols() {
        return Err(AlignmentError::DimensionMismatch(d, target.ncols()));
    }
    let (ks, kt) = (source.nrows(), target.nrows());
    if kt == 0 || ks == 0 {
        return Err(AlignmentError::EmptySide);
    }
    let scores = pairwise_neg_sqdist(source, target)?;
    let mut grad_s = Array2::<f64>::zeros((ks, d));
    let mut grad_t = Array2::<f64>::zeros((kt, d));
    let inv_k = 1.0 / ks as f64;
    let mut loss = 0.0;

    for a in 0..ks {
        let alpha = softmax(scores.row(a));
        let matched = alpha.dot(&target);
        // back-scores against every source instance
        let diffs: Array2<f64> = &source - &matched.view().insert_axis(Axis(0));
        let back: Array1<f64> = diffs.rows().into_iter().map(|r| -r.dot(&r)).collect();
        loss -= log_softmax_at(back.view(), a);

        // d loss_a / d back_i = p_i - [i == a], scaled by the anchor mean
        let mut g = softmax(back.view());
        g[a] -= 1.0;
        g *= inv_k;

        // back_i = -||f_S^i - matched||^2
        let mut g_matched = Array1::<f64>::zeros(d);
        for i in 0..ks {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let di = diffs.row(i);
            grad_s.row_mut(i).scaled_add(-2.0 * gi, &di);
            g_matched.scaled_add(2.0 * gi, &di);
        }

        // matched = sum_j alpha_j f_T^j
        let fs_a = source.row(a);
        for j in 0..kt {
            let ft_j = target.row(j);
            grad_t.row_mut(j).scaled_add(alpha[j], &g_matched);
            // softmax backward: dS_aj = alpha_j * g_matched . (f_T^j - matched)
            let ds = alpha[j] * (g_matched.dot(&ft_j) - g_matched.dot(&matched));
            if ds == 0.0 {
                continue;
            }
            // S_aj = -||f_S^a - f_T^j||^2
            for m in 0..d {
                let diff = fs_a[m] - ft_j[m];
                grad_s[[a, m]] -= 2.0 * diff * ds;
                grad_t[[j, m]] += 2.0 * diff * ds;
            }
        }
    }
    Ok((loss * inv_k, grad_s, grad_t))
}

/// `||mean(F_S) - mean(F_T)||^2` with its gradients.
pub fn linear_mmd(
    source: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), AlignmentError> {
    if source.ncols() != target.ncols() {
        return Err(AlignmentError::DimensionMismatch(source.ncols(), target.ncols()));
    }
    let (ks, kt) = (source.nrows(), target.nrows());
    if ks == 0 || kt == 0 {
        return Err(AlignmentError::EmptySide);
    }
    let diff = source.mean_axis(Axis(0)).unwrap() - target.mean_axis(Axis(0)).unwrap();
    let loss = diff.dot(&diff);
    let gs = &diff * (2.0 / ks as f64);
    let gt = &diff * (-2.0 / kt as f64);
    let grad_s = Array2::from_shape_fn((ks, diff.len()), |(_, m)| gs[m]);
    let grad_t = Array2::from_shape_fn((kt, diff.len()), |(_, m)| gt[m]);
    Ok((loss, grad_s, grad_t))
}

/// Central finite-difference check of [`cycle_consistency_loss`]; returns the
/// largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn check_gradients(source: ArrayView2<f64>, target: ArrayView2<f64>, step: f64) -> Result<f64, AlignmentError> {
    let (_, gs, gt) = cycle_consistency_loss(source, target)?;
    let mut worst: f64 = 0.0;
    let mut s = source.to_owned();
    let mut t = target.to_owned();
    let probe = |s: &Array2<f64>, t: &Array2<f64>| cycle_consistency_loss(s.view(), t.view()).map(|r| r.0);
    for idx in ndarray::indices(s.dim()) {
        let orig = s[idx];
        s[idx] = orig + step;
        let plus = probe(&s, &t)?;
        s[idx] = orig - step;
        let minus = probe(&s, &t)?;
        s[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((gs[idx] - numeric).abs() / numeric.abs().max(1.0));
    }
    for idx in ndarray::indices(t.dim()) {
        let orig = t[idx];
        t[idx] = orig + step;
        let plus = probe(&s, &t)?;
        t[idx] = orig - step;
        let minus = probe(&s, &t)?;
        t[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((gt[idx] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentKind {
    #[default]
    None,
    Cycle,
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentOptions {
    /// Also average in the target -> source -> target cycle.
    #[serde(default)]
    pub symmetric: bool,
    /// Use at most this many rows per class and domain.
    #[serde(default)]
    pub max_per_class: Option<usize>,
}

/// Same-class source and target feature matrices, keyed by class id.
#[derive(Debug, Clone, Default)]
pub struct FeatureBatch {
    pub dim: usize,
    pub classes: BTreeMap<usize, (Array2<f64>, Array2<f64>)>,
}

impl FeatureBatch {
    pub fn new(dim: usize) -> Self {
        FeatureBatch {
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class_id: usize, source: Array2<f64>, target: Array2<f64>) -> Result<(), AlignmentError> {
        for m in [&source, &target] {
            if m.ncols() != self.dim {
                return Err(AlignmentError::DimensionMismatch(self.dim, m.ncols()));
            }
        }
        self.classes.insert(class_id, (source, target));
        Ok(())
    }
}

/// Per-class gradients shaped like the inputs; zero for skipped classes.
#[derive(Debug, Clone, Default)]
pub struct AlignmentGradients {
    pub classes: BTreeMap<usize, (Array2<f64>, Array2<f64>)>,
}

#[derive(Debug, Clone)]
pub struct AlignmentOutput {
    pub loss: f64,
    pub gradients: AlignmentGradients,
    pub eligible: Vec<usize>,
    pub skipped: Vec<usize>,
}

fn capped(m: &Array2<f64>, cap: Option<usize>) -> ArrayView2<'_, f64> {
    let n = cap.map_or(m.nrows(), |c| c.min(m.nrows()));
    m.slice(ndarray::s![..n, ..])
}

fn write_capped(dst: &mut Array2<f64>, src: &Array2<f64>, scale: f64) {
    let n = src.nrows();
    dst.slice_mut(ndarray::s![..n, ..]).scaled_add(scale, src);
}

/// Mean of per-class losses over eligible classes, with gradients.
pub fn class_conditional_loss(batch: &FeatureBatch, kind: AlignmentKind, opts: AlignmentOptions) -> AlignmentOutput {
    let mut per_class = Vec::new();
    let mut gradients = AlignmentGradients::default();
    let mut skipped = Vec::new();
    for (&c, (fs, ft)) in &batch.classes {
        let (s, t) = (capped(fs, opts.max_per_class), capped(ft, opts.max_per_class));
        let mut gs = Array2::zeros(fs.raw_dim());
        let mut gt = Array2::zeros(ft.raw_dim());
        let mut terms = Vec::new();
        match kind {
            AlignmentKind::None => {}
            AlignmentKind::Mmd => {
                if let Ok((l, a, b)) = linear_mmd(s, t) {
                    terms.push((l, a, b));
                }
            }
            AlignmentKind::Cycle => {
                if s.nrows() >= 2 && t.nrows() >= 1 {
                    terms.push(cycle_consistency_loss(s, t).expect("shapes checked"));
                }
                if opts.symmetric && t.nrows() >= 2 && s.nrows() >= 1 {
                    let (l, b, a) = cycle_consistency_loss(t, s).expect("shapes checked");
                    terms.push((l, a, b));
                }
            }
        }
        if terms.is_empty() {
            skipped.push(c);
            gradients.classes.insert(c, (gs, gt));
            continue;
        }
        let share = 1.0 / terms.len() as f64;
        let mut loss = 0.0;
        for (l, a, b) in &terms {
            loss += share * l;
            write_capped(&mut gs, a, share);
            write_capped(&mut gt, b, share);
        }
        per_class.push((c, loss));
        gradients.classes.insert(c, (gs, gt));
    }
    let n = per_class.len();
    let loss = if n == 0 {
        0.0
    } else {
        let scale = 1.0 / n as f64;
        for (c, _) in &per_class {
            let (gs, gt) = gradients.classes.get_mut(c).unwrap();
            *gs *= scale;
            *gt *= scale;
        }
        per_class.iter().map(|(_, l)| l).sum::<f64>() * scale
    };
    AlignmentOutput {
        loss,
        gradients,
        eligible: per_class.iter().map(|(c, _)| *c).collect(),
        skipped,
    }
}
