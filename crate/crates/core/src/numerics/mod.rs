//! Tensor arithmetic with reverse-mode differentiation and a
//! finite-difference gradient oracle.

mod fd;
mod io;
mod params;
mod tape;
mod tensor;

pub use fd::{finite_difference_gradient, finite_difference_gradient_at, DEFAULT_FD_STEP};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor};
pub use params::{softplus_inverse, uniform_init, PId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::{max_rel_err, NumericsError, Result, Tensor};
