//! Minimal dense tensor + reverse-mode autodiff stack, generic over f32/f64.

mod elem;
mod gradcheck;
mod graph;
mod param;

#[cfg(test)]
mod tests;

pub use elem::{sigmoid, softplus, Elem};
pub use gradcheck::{grad_check, GradCheckOpts, GradReport, GradTarget, ParamError};
pub use graph::{concat_cols, concat_rows, Graph, Tensor};
pub use param::{gaussian, Init, Param, ParamStore};
