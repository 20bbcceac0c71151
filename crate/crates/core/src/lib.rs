//! Multi-view linear feature extraction with a dual contrastive objective.
//!
//! Each view `m` gets a projection `P_m` (`D_m x d`). Training minimizes a
//! sample-level InfoNCE loss over the embeddings `P_m^T x_i^m` (same sample
//! in another view = positive, other samples in other views = negatives)
//! plus a structural term that contrasts per-view self-reconstruction
//! coefficients `W^m` across views. Parameters are updated alternately with
//! Adam: one step per coefficient column, then one step on `P`.
//!
//! | module | contents |
//! |--------|----------|
//! | [`dataset`] | multi-view data, CSV I/O, splits, synthetic blobs |
//! | [`losses`] | the objective and its parts |
//! | [`gradients`] | analytic gradients, finite-difference checking |
//! | [`trainer`] | Adam, initialization, the alternating fit loop, model files |
//! | [`diagnostics`] | scatter-matrix identities, cross-view alignment |
//! | [`evaluation`] | projection, fusion, 1-NN, the repeated-split protocol |
//!
//! With the default `parallel` feature the per-anchor, per-column and
//! per-coordinate loops run on rayon. Results are collected in index order,
//! so both builds produce identical numbers.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod gradients;
pub mod losses;
mod par;
pub mod trainer;

pub use dataset::{load_views, split, stack_padded, synth_blobs, BlobSpec, MultiViewDataset, SplitSpec};
pub use error::{Error, ErrorKind, Result};
pub use evaluation::{fuse, knn_accuracy, project, run_experiment, ExperimentOptions, ResultsTable};
pub use gradients::{check_gradients, fd_gradient, grad_p, grad_w, GradCheckPlan, GradCheckReport};
pub use losses::{
    cosine_sim, reconstruction_penalty, sample_infonce, structural_contrastive, total_loss, CoefficientSet,
    Hyperparams, ProjectionStack,
};
pub use par::parallel_enabled;
pub use trainer::{
    adam_step, fit, fit_with, init_state, step_p, sweep_w, AdamState, FitOptions, Model, SweepMode, TrainState,
};
