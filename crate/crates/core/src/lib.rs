//! Exact and sampled computations with Wick calculus for independently
//! scattered noises on dyadic lattices.

pub mod algebra;
pub mod combinat;
pub mod condexp;
pub mod error;
pub mod lattice;
pub mod noise;
pub mod qft;
pub mod rmatrix;
pub mod scalar;
pub mod wick;

pub use algebra::{Monomial, MultiPoly, Poly1, SquareMatrix};
pub use error::{Error, Result};
pub use noise::Noise;
pub use scalar::{GaussRational, Rational};
pub use wick::WickPolynomial;

pub type RatPoly = Poly1<Rational>;
pub type F64Poly = Poly1<f64>;
