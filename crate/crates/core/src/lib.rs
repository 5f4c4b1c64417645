pub mod autodiff;
pub mod checks;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod network;
pub mod params;
pub mod prompt;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
