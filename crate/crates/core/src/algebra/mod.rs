//! Generic polynomial and matrix containers.

mod matrix;
mod multipoly;
mod poly;

pub use matrix::SquareMatrix;
pub use multipoly::{Monomial, MultiPoly};
pub use poly::Poly1;
