//! Dense tensors, radix-2 FFTs and a reverse-mode tape specialized to the
//! primitives the Fourier neural operator needs.

pub mod fft;
pub mod io;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{ComplexTensor, Tensor};
