//! Machine-unlearning laboratory: a tiny from-scratch transformer, a
//! synthetic fact corpus, gradient-ascent baselines, model extrapolation
//! (memorize, then step away from the memorized model) and the evaluation
//! harness that compares everything against a retrained oracle.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod extrapolation;
pub mod model;
pub mod objectives;
pub mod runner;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{axpy, dot, GradStore, ParamStore, Tensor};
