//! Synthetic instance-level sim2real detection task and its model.
//!
//! Each instance stands in for an ROI feature of one ground-truth box. The
//! appearance gap is a per-domain affine map on class latents; the content
//! gap is a per-domain class distribution and per-class box geometry.

pub mod fixtures;
mod model;
mod spec;

pub use model::{
    argmax, box_loss, check_model_gradients, det_loss, det_loss_and_grad, model_gradients, objective, AlignmentTerm,
    Forward, ModelGradients, ModelShape, ObjectiveBreakdown, ToyModel, WeightedInstance,
};
pub use spec::{
    generate_domain, to_dataset, write_features_csv, AppearanceSpec, BoxSpec, DomainSpec, SpecError, ToyDomainSpec,
    ToyInstance, TOY_IMAGE_SIZE,
};
