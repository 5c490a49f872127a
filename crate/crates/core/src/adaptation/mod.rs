//! Landmark-aware self-training and domain adversarial learning.

mod dal;
mod pipeline;
mod selection;

pub use dal::{loss_domain, DomainHead, BCE_EPS};
pub use pipeline::{
    checkpoint_path, last_completed_round, pseudo_label_path, run_adaptation, summary_path, AdaptationInputs,
    AdaptationOutcome, EpochStats, RoundSummary,
};
pub use selection::{
    curriculum_ratio, dynamic_thresholds, generate_pseudo_labels, num_rounds, select, CurriculumState,
    PseudoLabelFile, PseudoLabelRecord, SelectionMode, PSEUDO_LABEL_FORMAT, PSEUDO_LABEL_VERSION,
};

use crate::autograd::{Graph, Var};
use crate::tensor::Scalar;

/// Gradient reversal: identity forward, negated gradient backward.
pub fn grl<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.reverse_gradient(x)
}
