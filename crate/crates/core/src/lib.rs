//! Transducer loss with delay penalization.
//!
//! The crate computes the transducer loss over an alignment lattice in log
//! space, its occupation gradients and Viterbi alignment, the delay-penalty
//! input transformation that tilts training towards early emission, a
//! FastEmit-style baseline, a brute-force path oracle for validation, and
//! word-level latency metrics (MAD/MED).

pub mod error;
pub mod experiment;
pub mod latency;
pub mod lattice;
pub mod loss;
pub mod oracle;
pub mod par;
pub mod penalty;
pub mod synth;
pub mod toy;

pub use error::{Error, Result};
pub use lattice::{lattice_from_logits, Grid, Lattice, TokenizedUtterance};
pub use loss::{
    backward, forward, log_add, logit_grads, loss_and_grad, viterbi, AlignmentPath, AlphaBetaGrids,
    LossResult,
};
pub use penalty::{
    apply_penalty, delay_score, exact_augmented_grads, fastemit_loss_and_grad, path_score,
    penalized_loss_and_grad, PenaltyConfig, PenaltySide,
};

/// Loss and gradients for a batch of lattices, evaluated in parallel when
/// the `parallel` feature is on.
pub fn batch_loss_and_grad(lattices: &[Lattice]) -> Vec<LossResult> {
    par::map(lattices, loss_and_grad)
}

/// Same as [`batch_loss_and_grad`], always on the calling thread.
pub fn batch_loss_and_grad_sequential(lattices: &[Lattice]) -> Vec<LossResult> {
    par::map_sequential(lattices, loss_and_grad)
}
