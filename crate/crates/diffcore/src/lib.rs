//! Dense tensor arithmetic on a recording tape with reverse-mode
//! differentiation. Backward passes are themselves recorded, so gradients
//! can be differentiated again (needed for input-gradient penalties).
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`).

mod backward;
mod check;
mod error;
#[doc(hidden)]
pub mod fault;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_multi, FdReport};
pub use error::{DiffError, Result};
pub use params::{read_table, write_table_entry, BindMode, Bindings, ParamEntry, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{broadcast_shape, ConvGeom, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
