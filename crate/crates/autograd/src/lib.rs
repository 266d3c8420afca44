//! Reverse-mode automatic differentiation over dense `f64` matrices, with a
//! named parameter store and finite-difference gradient checking.

pub mod check;
pub mod mat;
pub mod params;
pub mod tape;

pub use check::{check_params, relative_error, GradCheckReport};
pub use mat::{gelu, sigmoid, Mat};
pub use params::{Group, ManifestError, Param, ParamId, ParamStore, TensorEntry};
pub use tape::{BatchStats, Gradients, Tape, Var};
