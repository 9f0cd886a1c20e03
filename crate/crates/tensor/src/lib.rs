//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Covers exactly the operators a convolutional encoder/decoder needs:
//! strided convolution and its transpose, adaptive average and max pooling,
//! batch normalization, dense layers, pointwise activations, bilinear
//! resizing, channel concatenation, 2×2 tiling and mean squared error.
//!
//! ```
//! use pyrad_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::scalar(3.0), true);
//! let zero = g.constant(Tensor::scalar(0.0));
//! let loss = g.mse(x, zero).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
//! ```

mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{BatchStats, Graph, OpKind, Var};
pub use kernels::Activation;
pub use tensor::Tensor;
