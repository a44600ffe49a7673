//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! ```
//! use ndcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

mod error;
pub mod io;
pub mod numdiff;
mod ops;
mod tape;
mod tensor;

pub use error::{NdError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
