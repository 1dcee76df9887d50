use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::spec::ToyInstance;
use crate::alignment::{class_conditional_loss, AlignmentKind, AlignmentOptions, FeatureBatch};
use crate::annotations::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub raw_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: (usize, usize, usize),
    b1: (usize, usize),
    w2: (usize, usize, usize),
    b2: (usize, usize),
    wc: (usize, usize, usize),
    bc: (usize, usize),
    wb: (usize, usize, usize),
    bb: (usize, usize),
    len: usize,
}

impl Layout {
    fn new(s: ModelShape) -> Self {
        let mut at = 0;
        let mut mat = |r: usize, c: usize| {
            let o = (at, r, c);
            at += r * c;
            o
        };
        let w1 = mat(s.hidden, s.raw_dim);
        let b1 = mat(s.hidden, 1);
        let w2 = mat(s.embed_dim, s.hidden);
        let b2 = mat(s.embed_dim, 1);
        let wc = mat(s.num_classes, s.embed_dim);
        let bc = mat(s.num_classes, 1);
        let wb = mat(4, s.embed_dim);
        let bb = mat(4, 1);
        Layout {
            w1,
            b1: (b1.0, b1.1),
            w2,
            b2: (b2.0, b2.1),
            wc,
            bc: (bc.0, bc.1),
            wb,
            bb: (bb.0, bb.1),
            len: at,
        }
    }
}

fn range(o: usize, n: usize) -> Range<usize> {
    o..o + n
}

/// Encoder `raw -> tanh(hidden) -> tanh(embed)` with a linear class head and a
/// linear box head, stored as one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    shape: ModelShape,
    params: Vec<f64>,
}

/// Gradients share the model's layout.
pub type ModelGradients = ToyModel;

macro_rules! mat_accessors {
    ($name:ident, $name_mut:ident) => {
        pub fn $name(&self) -> ArrayView2<'_, f64> {
            let (o, r, c) = Layout::new(self.shape).$name;
            ArrayView2::from_shape((r, c), &self.params[range(o, r * c)]).unwrap()
        }
        pub fn $name_mut(&mut self) -> ArrayViewMut2<'_, f64> {
            let (o, r, c) = Layout::new(self.shape).$name;
            ArrayViewMut2::from_shape((r, c), &mut self.params[range(o, r * c)]).unwrap()
        }
    };
}

macro_rules! vec_accessors {
    ($name:ident, $name_mut:ident) => {
        pub fn $name(&self) -> ArrayView1<'_, f64> {
            let (o, n) = Layout::new(self.shape).$name;
            ArrayView1::from(&self.params[range(o, n)])
        }
        pub fn $name_mut(&mut self) -> ArrayViewMut1<'_, f64> {
            let (o, n) = Layout::new(self.shape).$name;
            ArrayViewMut1::from(&mut self.params[range(o, n)])
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Array1<f64>,
    pub embedding: Array1<f64>,
    pub logits: Array1<f64>,
    pub pred_box: Array1<f64>,
}

impl ToyModel {
    pub fn zeros(shape: ModelShape) -> Self {
        ToyModel {
            shape,
            params: vec![0.0; Layout::new(shape).len],
        }
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(shape);
        let l = Layout::new(shape);
        for (o, rows, fan_in) in [l.w1, l.w2, l.wc, l.wb] {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut m.params[range(o, rows * fan_in)] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    mat_accessors!(w1, w1_mut);
    vec_accessors!(b1, b1_mut);
    mat_accessors!(w2, w2_mut);
    vec_accessors!(b2, b2_mut);
    mat_accessors!(wc, wc_mut);
    vec_accessors!(bc, bc_mut);
    mat_accessors!(wb, wb_mut);
    vec_accessors!(bb, bb_mut);

    pub fn forward(&self, features: &[f64]) -> Forward {
        let x = ArrayView1::from(features);
        let hidden = (self.w1().dot(&x) + self.b1()).mapv(f64::tanh);
        let embedding = (self.w2().dot(&hidden) + self.b2()).mapv(f64::tanh);
        let logits = self.wc().dot(&embedding) + self.bc();
        let pred_box = self.wb().dot(&embedding) + self.bb();
        Forward {
            hidden,
            embedding,
            logits,
            pred_box,
        }
    }

    pub fn predict_class(&self, features: &[f64]) -> usize {
        argmax(self.forward(features).logits.view())
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

/// Cross-entropy of `logits` at `class` plus smooth-L1 (transition 1.0)
/// summed over the four box coordinates.
pub fn det_loss(logits: ArrayView1<f64>, pred_box: ArrayView1<f64>, target_box: [f64; 4], class: usize) -> f64 {
    det_loss_and_grad(logits, pred_box, target_box, class).0
}

/// Box-only part of [`det_loss`].
pub fn box_loss(pred_box: ArrayView1<f64>, target_box: [f64; 4]) -> f64 {
    pred_box.iter().zip(target_box).map(|(p, t)| smooth_l1(p - t)).sum()
}

/// Loss with its gradients with respect to the logits and the box output.
pub fn det_loss_and_grad(
    logits: ArrayView1<f64>,
    pred_box: ArrayView1<f64>,
    target_box: [f64; 4],
    class: usize,
) -> (f64, Array1<f64>, Array1<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let ce = -(logits[class] - max - z.ln());
    let mut dlogits = logits.mapv(|l| (l - max).exp() / z);
    dlogits[class] -= 1.0;
    let diffs: Vec<f64> = pred_box.iter().zip(target_box).map(|(p, t)| p - t).collect();
    let bl: f64 = diffs.iter().map(|d| smooth_l1(*d)).sum();
    let dbox = diffs.iter().map(|d| smooth_l1_grad(*d)).collect();
    (ce + bl, dlogits, dbox)
}

/// One term of a weighted batch.
#[derive(Debug, Clone, Copy)]
pub struct WeightedInstance<'a> {
    pub instance: &'a ToyInstance,
    pub weight: f64,
}

/// Value of the weighted objective split by term.
///
/// `total = source_det + target_det + lambda * alignment`; the detection terms
/// are weighted loss sums divided by the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub source_det: f64,
    pub target_det: f64,
    pub alignment: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlignmentTerm {
    pub kind: AlignmentKind,
    pub options: AlignmentOptions,
}

/// Objective value and exact parameter gradients for a weighted batch.
///
/// The alignment term groups embeddings by ground-truth class and domain and
/// backpropagates through the encoder.
pub fn model_gradients(
    model: &ToyModel,
    batch: &[WeightedInstance<'_>],
    lambda: f64,
    alignment: AlignmentTerm,
) -> (ObjectiveBreakdown, ModelGradients) {
    let mut grads = ToyModel::zeros(model.shape);
    let mut out = ObjectiveBreakdown {
        lambda,
        ..Default::default()
    };
    if batch.is_empty() {
        return (out, grads);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let passes: Vec<Forward> = batch.iter().map(|b| model.forward(&b.instance.features)).collect();

    // d total / d embedding, per batch row
    let mut d_embed: Vec<Array1<f64>> = Vec::with_capacity(batch.len());
    for (b, f) in batch.iter().zip(&passes) {
        let ann = &b.instance.annotation;
        let (loss, mut dl, mut db) =
            det_loss_and_grad(f.logits.view(), f.pred_box.view(), ann.as_array(), ann.class_id);
        let scale = b.weight * inv_n;
        match b.instance.domain {
            Domain::Source => out.source_det += scale * loss,
            Domain::Target => out.target_det += scale * loss,
        }
        dl *= scale;
        db *= scale;
        accumulate_outer(grads.wc_mut(), dl.view(), f.embedding.view());
        grads.bc_mut().scaled_add(1.0, &dl);
        accumulate_outer(grads.wb_mut(), db.view(), f.embedding.view());
        grads.bb_mut().scaled_add(1.0, &db);
        d_embed.push(model.wc().t().dot(&dl) + model.wb().t().dot(&db));
    }

    if alignment.kind != AlignmentKind::None {
        let mut rows: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, b) in batch.iter().enumerate() {
            let entry = rows.entry(b.instance.annotation.class_id).or_default();
            match b.instance.domain {
                Domain::Source => entry.0.push(i),
                Domain::Target => entry.1.push(i),
            }
        }
        let d = model.shape.embed_dim;
        let stack = |idx: &[usize]| Array2::from_shape_fn((idx.len(), d), |(r, m)| passes[idx[r]].embedding[m]);
        let mut features = FeatureBatch::new(d);
        for (&c, (s, t)) in &rows {
            features.insert(c, stack(s), stack(t)).expect("embedding dims agree");
        }
        let aligned = class_conditional_loss(&features, alignment.kind, alignment.options);
        out.alignment = aligned.loss;
        for (c, (gs, gt)) in &aligned.gradients.classes {
            let (s, t) = &rows[c];
            for (r, &i) in s.iter().enumerate() {
                d_embed[i].scaled_add(lambda, &gs.row(r));
            }
            for (r, &i) in t.iter().enumerate() {
                d_embed[i].scaled_add(lambda, &gt.row(r));
            }
        }
    }

    for ((b, f), de) in batch.iter().zip(&passes).zip(d_embed) {
        let d_pre2 = de * f.embedding.mapv(|e| 1.0 - e * e);
        accumulate_outer(grads.w2_mut(), d_pre2.view(), f.hidden.view());
        grads.b2_mut().scaled_add(1.0, &d_pre2);
        let d_hidden = model.w2().t().dot(&d_pre2);
        let d_pre1 = d_hidden * f.hidden.mapv(|h| 1.0 - h * h);
        accumulate_outer(
            grads.w1_mut(),
            d_pre1.view(),
            ArrayView1::from(&b.instance.features[..]),
        );
        grads.b1_mut().scaled_add(1.0, &d_pre1);
    }

    out.total = out.source_det + out.target_det + lambda * out.alignment;
    (out, grads)
}

fn accumulate_outer(mut dst: ArrayViewMut2<f64>, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    for (i, l) in left.iter().enumerate() {
        if *l == 0.0 {
            continue;
        }
        dst.row_mut(i).scaled_add(*l, &right);
    }
}

/// Objective value only.
pub fn objective(
    model: &ToyModel,
    batch: &[WeightedInstance<'_>],
    lambda: f64,
    alignment: AlignmentTerm,
) -> ObjectiveBreakdown {
    model_gradients(model, batch, lambda, alignment).0
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all parameters,
/// using central differences of the total objective.
pub fn check_model_gradients(
    model: &ToyModel,
    batch: &[WeightedInstance<'_>],
    lambda: f64,
    alignment: AlignmentTerm,
    step: f64,
) -> f64 {
    let (_, grads) = model_gradients(model, batch, lambda, alignment);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + step;
        let plus = objective(&probe, batch, lambda, alignment).total;
        probe.params[i] = orig - step;
        let minus = objective(&probe, batch, lambda, alignment).total;
        probe.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((grads.params[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}
