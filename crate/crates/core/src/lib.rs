pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use autodiff::{Backend, Eval, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoders;
pub mod fast;
pub mod index;
pub mod io;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod slow;
pub mod train;
