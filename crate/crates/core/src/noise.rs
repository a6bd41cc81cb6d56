//! The three reference convolution semigroups: Gauss, Poisson (rate 1) and
//! Gamma (scale 1). `λ` is always the cell volume.
//!
//! Derivatives of the characteristic function are represented exactly as
//! `ν̂_λ^{(k)} = f_k(u)·ν̂_λ`, with `f_k` a polynomial in a noise-specific
//! basis variable `u`: `ξ` (Gauss), `e^{-iξ}` (Poisson) or `(1+iξ)^{-1}`
//! (Gamma). Derivative closure and the R matrices reduce to triangular solves in
//! that basis.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::algebra::Poly1;
use crate::combinat::{hermite_var, rising_factorial, stirling2_table};
use crate::error::{invalid, Error, Result};
use crate::lattice::{FieldConfig, Partition};
use crate::scalar::{gauss_to_f64, i_pow, real, GaussRational, Rational, Real};

pub type C64 = Complex<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Gauss,
    Poisson,
    Gamma,
}

impl Noise {
    pub const ALL: [Noise; 3] = [Noise::Gauss, Noise::Poisson, Noise::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            Noise::Gauss => "gauss",
            Noise::Poisson => "poisson",
            Noise::Gamma => "gamma",
        }
    }

    /// Mean and variance of the total `s ~ ν_λ`.
    pub fn moments(self, lambda: f64) -> (f64, f64) {
        match self {
            Noise::Gauss => (0.0, lambda),
            Noise::Poisson | Noise::Gamma => (lambda, lambda),
        }
    }

    pub fn in_support(self, s: f64) -> bool {
        match self {
            Noise::Gauss => s.is_finite(),
            Noise::Poisson => s >= 0.0 && s.fract() == 0.0,
            Noise::Gamma => s >= 0.0,
        }
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Noise {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gauss" | "gaussian" => Ok(Noise::Gauss),
            "poisson" => Ok(Noise::Poisson),
            "gamma" => Ok(Noise::Gamma),
            other => invalid(format!("unknown noise {other:?} (expected gauss, poisson or gamma)")),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return invalid(format!("semigroup parameter must be positive, got {lambda}"));
    }
    Ok(())
}

/// `ρ_λ(s)`; zero off the support.
pub fn density(noise: Noise, lambda: f64, s: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if !noise.in_support(s) {
        return Ok(0.0);
    }
    Ok(match noise {
        Noise::Gauss => (-s * s / (2.0 * lambda)).exp() / (2.0 * std::f64::consts::PI * lambda).sqrt(),
        Noise::Poisson => (-lambda + s * lambda.ln() - ln_gamma(s + 1.0)).exp(),
        Noise::Gamma => {
            if s == 0.0 {
                match lambda.partial_cmp(&1.0) {
                    Some(std::cmp::Ordering::Less) => f64::INFINITY,
                    Some(std::cmp::Ordering::Equal) => 1.0,
                    _ => 0.0,
                }
            } else {
                ((lambda - 1.0) * s.ln() - s - ln_gamma(lambda)).exp()
            }
        }
    })
}

/// `ν̂_λ(ξ) = E e^{-iξs}` at a possibly complex argument.
pub fn charfn_complex(noise: Noise, lambda: f64, xi: C64) -> Result<C64> {
    check_lambda(lambda)?;
    let i = C64::i();
    Ok(match noise {
        Noise::Gauss => (-0.5 * lambda * xi * xi).exp(),
        Noise::Poisson => (lambda * ((-i * xi).exp() - 1.0)).exp(),
        Noise::Gamma => {
            let base = C64::one() + i * xi;
            if base.norm() == 0.0 {
                return Err(Error::Domain("Gamma characteristic function has a pole at ξ = i".into()));
            }
            (-lambda * base.ln()).exp()
        }
    })
}

pub fn charfn(noise: Noise, lambda: f64, xi: f64) -> Result<C64> {
    charfn_complex(noise, lambda, C64::new(xi, 0.0))
}

/// `log ν̂_λ(ξ) = λψ(ξ)` with the principal branch for Gamma.
pub fn log_charfn(noise: Noise, lambda: f64, xi: C64) -> Result<C64> {
    check_lambda(lambda)?;
    let i = C64::i();
    Ok(match noise {
        Noise::Gauss => -0.5 * lambda * xi * xi,
        Noise::Poisson => lambda * ((-i * xi).exp() - 1.0),
        Noise::Gamma => {
            let base = C64::one() + i * xi;
            if base.norm() == 0.0 {
                return Err(Error::Domain("Gamma characteristic function has a pole at ξ = i".into()));
            }
            -lambda * base.ln()
        }
    })
}

/// `ν̂_λ^{(k)}(ξ)` from the closed forms: `(-λ)^k H_k^{1/λ}(ξ)ν̂_λ` (Gauss),
/// `(-i)^k Σ_l {k,l}(λe^{-iξ})^l ν̂_λ` (Poisson),
/// `(-i)^k λ^{(k)} (1+iξ)^{-λ-k}` (Gamma).
pub fn charfn_derivative(noise: Noise, lambda: f64, k: usize, xi: f64) -> Result<C64> {
    let base = charfn(noise, lambda, xi)?;
    let mi_k = C64::new(0.0, -1.0).powi(k as i32);
    Ok(match noise {
        Noise::Gauss => {
            let h = hermite_var(k, &(1.0 / lambda));
            base * (-lambda).powi(k as i32) * h.eval(&xi)
        }
        Noise::Poisson => {
            let s2 = stirling2_table(k);
            let z = lambda * C64::new(0.0, -xi).exp();
            let sum: C64 = (0..=k)
                .map(|l| z.powi(l as i32) * Real::as_f64(&Rational::from_integer(s2[k][l].clone())))
                .sum();
            base * mi_k * sum
        }
        Noise::Gamma => {
            let w = (C64::one() + C64::new(0.0, xi)).inv();
            base * mi_k * rising_factorial(&lambda, k) * w.powi(k as i32)
        }
    })
}

/// Value of the basis variable `u` at real `ξ`.
pub fn basis_variable(noise: Noise, xi: C64) -> C64 {
    match noise {
        Noise::Gauss => xi,
        Noise::Poisson => (C64::new(0.0, -1.0) * xi).exp(),
        Noise::Gamma => (C64::one() + C64::i() * xi).inv(),
    }
}

fn gr_int(n: usize) -> GaussRational {
    real(Rational::from_integer(n.into()))
}

/// `d/dξ` acting on a polynomial in the basis variable.
fn differentiate_in_basis(noise: Noise, p: &Poly1<GaussRational>) -> Poly1<GaussRational> {
    let c = p.coeffs();
    match noise {
        Noise::Gauss => p.derivative(),
        // d/dξ e^{-imξ} = -im e^{-imξ}
        Noise::Poisson => Poly1::new(
            c.iter()
                .enumerate()
                .map(|(m, a)| a.clone() * gr_int(m) * i_pow(-1))
                .collect(),
        ),
        // d/dξ w^m = -im w^{m+1}
        Noise::Gamma => {
            let mut out = vec![GaussRational::zero(); c.len() + 1];
            for (m, a) in c.iter().enumerate() {
                out[m + 1] = a.clone() * gr_int(m) * i_pow(-1);
            }
            Poly1::new(out)
        }
    }
}

/// `f_0, …, f_k` with `ν̂_λ^{(j)} = f_j(u) ν̂_λ`, exact in `λ`.
pub fn derivative_basis(noise: Noise, lambda: &Rational, k: usize) -> Vec<Poly1<GaussRational>> {
    let lam = real(lambda.clone());
    let log_derivative = match noise {
        Noise::Gauss => Poly1::monomial(-lam, 1),
        Noise::Poisson | Noise::Gamma => Poly1::monomial(lam * i_pow(-1), 1),
    };
    let mut out = Vec::with_capacity(k + 1);
    let mut f = Poly1::one();
    for _ in 0..=k {
        let next = &differentiate_in_basis(noise, &f) + &(&f * &log_derivative);
        out.push(f);
        f = next;
    }
    out
}

/// Coefficients `c` with `target = Σ_ℓ c_ℓ basis[ℓ]`, where `basis[ℓ]` has
/// degree exactly `ℓ`. Fails if the target is outside the span.
pub fn express_in_basis(
    target: &Poly1<GaussRational>,
    basis: &[Poly1<GaussRational>],
) -> Result<Vec<GaussRational>> {
    for (l, b) in basis.iter().enumerate() {
        if b.degree() != Some(l) {
            return Err(Error::Singular(format!("basis element {l} has degree {:?}", b.degree())));
        }
    }
    if target.degree().is_some_and(|d| d >= basis.len()) {
        return Err(Error::Singular(format!(
            "degree {:?} target outside a {}-element basis",
            target.degree(),
            basis.len()
        )));
    }
    let mut rest = target.clone();
    let mut coeffs = vec![GaussRational::zero(); basis.len()];
    for l in (0..basis.len()).rev() {
        let c = rest.coeff(l) / basis[l].leading().unwrap().clone();
        if !c.is_zero() {
            rest = &rest - &basis[l].scale(&c);
        }
        coeffs[l] = c;
    }
    if !rest.is_zero() {
        return Err(Error::Singular("remainder after triangular elimination".into()));
    }
    Ok(coeffs)
}

pub const MAX_CLOSURE_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeClosure {
    /// `c_{k,0..=k+1}(λ)`.
    pub coefficients: Vec<GaussRational>,
    /// Max deviation of the identity on the probe grid, using closed-form
    /// derivatives.
    pub residual: f64,
}

/// Solves `ν̂_λ^{(k)} ν̂_λ' = Σ_{ℓ ≤ k+1} c_{kℓ} ν̂_λ^{(ℓ)} ν̂_λ` exactly and
/// evaluates the residual on `ξ ∈ {-3, -2.5, …, 3}`.
pub fn check_derivative_closure(noise: Noise, k: usize, lambda: &Rational) -> Result<DerivativeClosure> {
    if k > MAX_CLOSURE_ORDER {
        return invalid(format!("order {k} exceeds {MAX_CLOSURE_ORDER}"));
    }
    if *lambda <= Rational::zero() {
        return invalid("semigroup parameter must be positive");
    }
    let basis = derivative_basis(noise, lambda, k + 1);
    let target = &basis[k] * &basis[1];
    let coefficients = express_in_basis(&target, &basis)?;

    let lam = Real::as_f64(lambda);
    let cf: Vec<C64> = coefficients.iter().map(gauss_to_f64).collect();
    let mut residual = 0.0f64;
    for step in -6..=6 {
        let xi = step as f64 * 0.5;
        let lhs = charfn_derivative(noise, lam, k, xi)? * charfn_derivative(noise, lam, 1, xi)?;
        let base = charfn(noise, lam, xi)?;
        let mut rhs = C64::zero();
        for (l, c) in cf.iter().enumerate() {
            rhs += c * charfn_derivative(noise, lam, l, xi)? * base;
        }
        residual = residual.max((lhs - rhs).norm());
    }
    Ok(DerivativeClosure { coefficients, residual })
}

/// RNG for cell `index`: one ChaCha8 stream per cell, keyed by `seed`.
pub fn cell_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const POISSON_INVERSION_MAX: f64 = 30.0;

/// Draws the total `s ~ ν_λ`.
pub fn sample_total<R: Rng + ?Sized>(noise: Noise, lambda: f64, rng: &mut R) -> f64 {
    match noise {
        Noise::Gauss => {
            let z: f64 = StandardNormal.sample(rng);
            z * lambda.sqrt()
        }
        Noise::Poisson if lambda <= POISSON_INVERSION_MAX => {
            let u: f64 = rng.random();
            let mut p = (-lambda).exp();
            let mut cdf = p;
            let mut s = 0u64;
            while u > cdf && p > 0.0 {
                s += 1;
                p *= lambda / s as f64;
                cdf += p;
            }
            s as f64
        }
        Noise::Poisson => Poisson::new(lambda).expect("positive rate").sample(rng),
        Noise::Gamma => Gamma::new(lambda, 1.0).expect("positive shape").sample(rng),
    }
}

/// Samples `x_p = s_p / |p|` independently per cell with `s_p ~ ν_{|p|}`.
/// Cell `i` always uses stream `i`, so the result does not depend on the
/// thread count.
pub fn sample_field(partition: &Partition, noise: Noise, seed: u64) -> FieldConfig<f64> {
    let vol = Real::as_f64(&partition.cell_volume());
    let values: Vec<f64> = (0..partition.num_cells())
        .into_par_iter()
        .map(|i| {
            let mut rng = cell_rng(seed, i as u64);
            sample_total(noise, vol, &mut rng) / vol
        })
        .collect();
    FieldConfig { partition: partition.clone(), values }
}

/// Replica `r` of a Monte Carlo run: the whole field drawn sequentially
/// from stream `r` of `seed`. Replicas are independent and can be generated
/// in any order.
pub fn sample_replica(partition: &Partition, noise: Noise, seed: u64, replica: u64) -> FieldConfig<f64> {
    let vol = Real::as_f64(&partition.cell_volume());
    let mut rng = cell_rng(seed, replica);
    let values = (0..partition.num_cells()).map(|_| sample_total(noise, vol, &mut rng) / vol).collect();
    FieldConfig { partition: partition.clone(), values }
}
