//! The triangular matrices `R(μ,λ)` with
//! `ν̂_μ^{(j)} ν̂_{λ-μ} = Σ_ℓ R_{jℓ}(μ,λ) ν̂_λ^{(ℓ)}`, and `R(λ) = R(1,λ)`.
//!
//! Both sides divided by `ν̂_λ` are polynomials in the noise's basis
//! variable, so each row is an exact triangular solve.

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::algebra::SquareMatrix;
use crate::error::{invalid, Result};
use crate::noise::{charfn, charfn_derivative, derivative_basis, express_in_basis, Noise};
use crate::scalar::{gauss_to_f64, GaussRational, Rational, Real};

pub const MAX_ORDER: usize = 8;

fn check_args(k: usize, params: &[&Rational]) -> Result<()> {
    if k > MAX_ORDER {
        return invalid(format!("order {k} exceeds {MAX_ORDER}"));
    }
    if params.iter().any(|p| **p <= Rational::zero()) {
        return invalid("semigroup parameters must be positive");
    }
    Ok(())
}

/// `R^k(μ,λ)`, a `(k+1)×(k+1)` lower-triangular matrix.
pub fn r_matrix_pair(noise: Noise, k: usize, mu: &Rational, lambda: &Rational) -> Result<SquareMatrix<GaussRational>> {
    check_args(k, &[mu, lambda])?;
    let source = derivative_basis(noise, mu, k);
    let target = derivative_basis(noise, lambda, k);
    let mut r = SquareMatrix::zeros(k + 1);
    for (j, f) in source.iter().enumerate() {
        for (l, c) in express_in_basis(f, &target)?.into_iter().enumerate() {
            r.set(j, l, c);
        }
    }
    Ok(r)
}

/// `R^k(λ) = R^k(1,λ)`.
pub fn r_matrix(noise: Noise, k: usize, lambda: &Rational) -> Result<SquareMatrix<GaussRational>> {
    r_matrix_pair(noise, k, &Rational::one(), lambda)
}

/// Max deviation of `ν̂_μ^{(j)} ν̂_λ = Σ_ℓ R_{jℓ}(μ,λ) ν̂_λ^{(ℓ)} ν̂_μ` over a
/// grid of `ξ`, evaluated with closed-form derivatives and measured
/// relative to `1 + Σ|terms|`.
pub fn relation_residual(noise: Noise, r: &SquareMatrix<GaussRational>, mu: &Rational, lambda: &Rational) -> Result<f64> {
    let (m, l) = (mu.as_f64(), lambda.as_f64());
    let mut worst = 0.0f64;
    for step in -8..=8 {
        let xi = step as f64 * 0.375;
        let (nm, nl) = (charfn(noise, m, xi)?, charfn(noise, l, xi)?);
        for j in 0..r.dim() {
            let lhs = charfn_derivative(noise, m, j, xi)? * nl;
            let mut rhs = Complex::zero();
            let mut scale = 1.0 + lhs.norm();
            for ll in 0..=j {
                let c = r.get(j, ll);
                if !c.is_zero() {
                    let term = gauss_to_f64(c) * charfn_derivative(noise, l, ll, xi)? * nm;
                    scale += term.norm();
                    rhs += term;
                }
            }
            worst = worst.max((lhs - rhs).norm() / scale);
        }
    }
    Ok(worst)
}
