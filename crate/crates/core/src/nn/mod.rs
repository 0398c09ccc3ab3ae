//! Minimal `f64` neural-network stack: tensors, deterministic parallel
//! matmul kernels, a reverse-mode tape with fused sequence ops, dense
//! networks, Adam, and a finite-difference gradient checker.

pub mod act;
pub mod adam;
pub mod fd;
pub mod linalg;
pub mod mlp;
pub mod params;
pub mod project;
pub mod seq;
pub mod tape;
pub mod tensor;

pub use act::Activation;
pub use adam::{soft_update, AdamState};
pub use fd::finite_difference_check;
pub use linalg::Workers;
pub use mlp::{xavier_uniform, Mlp};
pub use params::{clip_gradients, Bound, GradSet, ParamId, ParamSet};
pub use project::{hypersphere_project, offset_init, std_normal};
pub use tape::{Gradients, Tape, Unary, VarId};
pub use tensor::{l2_distance, rel_l2_diff, Tensor};
