//! Small dense-tensor toolkit: `f64` tensors, a reverse-mode [`Tape`],
//! an Adam-updated [`ParamStore`], finite-difference checking and a
//! binary checkpoint format.
//!
//! ```
//! use mmsc_tensor::{ParamStore, Tape, Tensor};
//!
//! let mut params = ParamStore::new();
//! params.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
//! let mut tape = Tape::new();
//! let w = tape.param(&params, "w").unwrap();
//! let loss = tape.sum(w).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{sigmoid, Activation, Gradients, Tape, Var, ELU_ALPHA, LEAKY_RELU_SLOPE};
pub use tensor::{cosine, dot, norm, Tensor};
