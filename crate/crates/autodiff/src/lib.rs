//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Values are `f64` ndarrays. Every operation appends a node to a [`Tape`];
//! [`Tape::grad`] walks the recording backwards and emits gradients that are
//! themselves tape variables, so differentiating an expression built from
//! earlier gradients yields second and higher derivatives with no extra
//! machinery.
//!
//! ```
//! use vaemap_autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.leaf_scalar(3.0);
//! let y = x.square().mul(&x); // x^3
//! let dy = tape.grad(&y, &[&x])[0].clone().unwrap(); // 3x^2 = 27
//! let d2y = tape.grad(&dy, &[&x])[0].clone().unwrap(); // 6x = 18
//! assert_eq!((dy.scalar(), d2y.scalar()), (27.0, 18.0));
//! ```

mod conv;
mod tape;

pub mod check;

pub use conv::ConvGeom;
pub use tape::{Tape, Var};

/// Dynamic-dimensional `f64` array, the only value type the tape records.
pub type Arr = ndarray::ArrayD<f64>;
