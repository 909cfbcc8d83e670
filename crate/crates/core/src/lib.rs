//! LSTM and LSTWM (LSTM with working memory) recurrent networks with
//! hand-written backpropagation through time, a finite-difference gradient
//! oracle, ADAM, and training harnesses for character-level text prediction
//! and the MNIST digit-sum task.

pub mod cells;
pub mod data;
pub mod grad;
pub mod harness;
pub mod math;
pub mod optim;

pub use cells::{CellKind, CellParams, LayerState, Network, NetworkSpec, StepCache};
pub use grad::{bptt, finite_diff_check, Gradients, LossMask, Sequence};
pub use math::{ActivationKind, RealMat, SeededRng};
pub use optim::{AdamConfig, AdamState, RegConfig};
