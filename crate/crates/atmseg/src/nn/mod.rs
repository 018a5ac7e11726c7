//! Minimal f64 reverse-mode autodiff and training plumbing.
//!
//! Everything the model computes during training is recorded on a [`Graph`]
//! tape; `Graph::backward` replays it in reverse. Double precision throughout
//! so analytic gradients can be checked against central finite differences.

mod graph;
mod init;
mod optim;
mod params;
mod pe;

pub use graph::{finite_diff, rel_err, ArrD, Gradients, Graph, Var};
pub use init::{he_normal, uniform, xavier_normal};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use pe::{sinusoidal_1d, sinusoidal_2d};
