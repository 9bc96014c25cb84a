//! Cross-modal attention congruence regularization.
//!
//! The crate partitions a joint language+vision self-attention score matrix
//! into its four modality blocks and measures how well each intra-modal
//! block agrees with the other modality's block carried across by the
//! cross-modal attention. Around that core it provides:
//!
//! * [`divergence`]: row KL and the symmetric matrix KL,
//! * [`congruence`]: the congruence losses, the brute-force soft
//!   equivalence oracle and the hard argmax baseline,
//! * [`gradients`]: analytic gradients of the loss and a finite-difference
//!   checker,
//! * [`toy`]: a one-layer two-modality encoder trained on synthetic
//!   relational scenes, with and without the regularizer,
//! * [`analysis`]: argmax-entropy diagnostics and per-bundle reports,
//! * [`cli`]: the `congruence` command-line front end.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod congruence;
pub mod divergence;
pub mod error;
mod extended;
pub mod gradients;
pub mod sampling;
pub mod toy;

pub use attention::{matmul, partition, row_softmax, AttentionBundle, BlockPartition, Matrix};
pub use congruence::{cacr_total, CacrLoss, CorrespondenceMap};
pub use divergence::{kl_row, mkl, DivergenceValue};
pub use error::{Error, Result};
pub use gradients::{cacr_gradients, BlockGradients, BlockId};
