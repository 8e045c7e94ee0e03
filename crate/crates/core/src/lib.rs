//! Virtual adversarial training (VAT) on a self-contained reverse-mode
//! autodiff core.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. The `std`
//! feature only turns on runtime SIMD dispatch in the matrix kernel.
//!
//! Layout:
//!
//! * [`tensor`], [`rng`], [`autodiff`]: dense f64 tensors, a counter-based
//!   RNG and a recorded-graph reverse-mode differentiator.
//! * [`model`]: the ReLU MLP classifier with optional hidden-layer noise.
//! * [`divergence`]: softmax, KL, one-hot NLL and conditional entropy.
//! * [`perturb`]: adversarial, virtual adversarial and random perturbations.
//! * [`objective`], [`optim`], [`train`]: the regularized objective with its
//!   stop-gradient contract, ADAM and the two-minibatch training loop.
//! * [`oracle`]: dense Hessians, eigenpairs, SD-norm and LDS heatmaps used to
//!   check the approximations above.
//! * [`data`]: in-memory datasets, the two-moons generator and splitting.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod divergence;
mod error;
pub mod model;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod perturb;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{Classifier, ClassifierSpec, ParamSet};
pub use objective::{Method, ObjectiveConfig};
pub use perturb::{Norm, PerturbConfig, Perturbation, PerturbationKind};
pub use rng::Rng;
pub use tensor::Tensor;
pub use train::{RunRecord, TrainConfig};
