//! Sharpness-aware semi-supervised learning on desk-scale synthetic tasks.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), MLP classifiers with a flat parameter view ([`model`]),
//! synthetic 2-D datasets with labeled/unlabeled splits ([`data`]),
//! classification and consistency losses ([`losses`]), the FlatMatch
//! optimizer family ([`optim`]), end-to-end trainers ([`trainers`]), and the
//! measurement apparatus for sharpness, loss landscapes, and gradient angles
//! ([`diagnostics`]).

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainers;

pub use data::{augment, make_dataset, split_ssl, AugmentationSpec, Batch, BatchSampler, DatasetKind, SslDataset, Strength};
pub use diagnostics::{gradient_angle, landscape_1d, landscape_2d, sharpness_probe, GradientAngle, LandscapeGrid, ProbeData, SharpnessReport};
pub use error::{Error, Result};
pub use losses::{consistency_loss, cross_entropy, pseudo_targets, MaskedTargets};
pub use model::{perturb, random_direction, Layout, MlpSpec, ParamVector, TapedParams};
pub use optim::{cross_sharpness, ema_update, flatmatch_step, flatmatch_step_views, sam_perturbation, sgd_step, DistanceKind, EmaConvention, FlatMatchConfig, GradBuffer, SamPerturbation, SgdState, StepDiagnostics};
pub use tensor::{finite_diff_max_rel_err, Tape, Tensor};
pub use trainers::{select_topk_confident, train_flatmatch, train_flatmatch_fixed_labels, train_ssl_baseline, train_supervised, ExperimentRecord, TrainConfig, TrainOutput};
