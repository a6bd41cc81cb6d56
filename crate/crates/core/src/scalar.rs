//! Scalar abstractions shared by the polynomial and matrix code.
//!
//! [`Field`] is anything with exact-or-float field arithmetic (including
//! Gaussian rationals); [`Real`] adds ordering and conversions so that the
//! same routine can run over `f32`, `f64` or exact [`Rational`]s.

use std::fmt::Debug;
use std::ops::Neg;
use std::str::FromStr;

use num_bigint::BigInt;
use num_complex::Complex;
use num_rational::BigRational;
use num_traits::{Num, One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

pub type Rational = BigRational;
pub type GaussRational = Complex<Rational>;

pub trait Field: Clone + Debug + PartialEq + Num + Neg<Output = Self> + Send + Sync {}

impl<T> Field for T where T: Clone + Debug + PartialEq + Num + Neg<Output = Self> + Send + Sync {}

pub trait Real: Field + PartialOrd {
    fn from_rational(r: &Rational) -> Self;
    fn as_f64(&self) -> f64;
    fn floor_i64(&self) -> i64;

    fn from_i64(n: i64) -> Self {
        Self::from_rational(&Rational::from_integer(n.into()))
    }

    fn abs_val(&self) -> Self {
        if *self < Self::zero() {
            -self.clone()
        } else {
            self.clone()
        }
    }

    /// True for types whose arithmetic never rounds.
    fn is_exact() -> bool {
        false
    }
}

impl Real for f64 {
    fn from_rational(r: &Rational) -> Self {
        ToPrimitive::to_f64(r).unwrap_or(f64::NAN)
    }
    fn as_f64(&self) -> f64 {
        *self
    }
    fn floor_i64(&self) -> i64 {
        self.floor() as i64
    }
    fn from_i64(n: i64) -> Self {
        n as f64
    }
}

impl Real for f32 {
    fn from_rational(r: &Rational) -> Self {
        r.to_f32().unwrap_or(f32::NAN)
    }
    fn as_f64(&self) -> f64 {
        *self as f64
    }
    fn floor_i64(&self) -> i64 {
        self.floor() as i64
    }
    fn from_i64(n: i64) -> Self {
        n as f32
    }
}

impl Real for Rational {
    fn from_rational(r: &Rational) -> Self {
        r.clone()
    }
    fn as_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn floor_i64(&self) -> i64 {
        self.floor().to_integer().to_i64().expect("floor fits in i64")
    }
    fn abs_val(&self) -> Self {
        self.abs()
    }
    fn is_exact() -> bool {
        true
    }
}

pub fn rat(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

pub fn rat_int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

/// Formats a rational as `num/den`, always including the denominator.
pub fn format_rational(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Parses `num/den`, a bare integer, or a finite decimal such as `0.25`.
pub fn parse_rational(s: &str) -> Result<Rational> {
    let s = s.trim();
    let bad = || Error::InvalidArgument(format!("cannot parse rational from {s:?}"));
    if let Some((int_part, frac_part)) = s.split_once('.') {
        if s.contains('/') {
            return Err(bad());
        }
        let negative = int_part.starts_with('-');
        let int_digits = int_part.trim_start_matches(['-', '+']);
        let digits = format!("{}{}", if int_digits.is_empty() { "0" } else { int_digits }, frac_part);
        let n = BigInt::from_str(&digits).map_err(|_| bad())?;
        let den = num_traits::pow(BigInt::from(10), frac_part.len());
        let r = Rational::new(n, den);
        return Ok(if negative { -r } else { r });
    }
    let r = Rational::from_str(s).map_err(|_| bad())?;
    Ok(r)
}

pub fn gauss_rat(re: Rational, im: Rational) -> GaussRational {
    Complex::new(re, im)
}

/// `i^k` as an exact Gaussian rational, for any integer `k`.
pub fn i_pow(k: i64) -> GaussRational {
    match k.rem_euclid(4) {
        0 => Complex::new(Rational::one(), Rational::zero()),
        1 => Complex::new(Rational::zero(), Rational::one()),
        2 => Complex::new(-Rational::one(), Rational::zero()),
        _ => Complex::new(Rational::zero(), -Rational::one()),
    }
}

pub fn real(r: Rational) -> GaussRational {
    Complex::new(r, Rational::zero())
}

pub fn gauss_to_f64(z: &GaussRational) -> Complex<f64> {
    Complex::new(Real::as_f64(&z.re), Real::as_f64(&z.im))
}

/// Integer power of a field element; negative exponents invert.
pub fn powi<T: Field>(x: &T, e: i64) -> T {
    let mut base = if e < 0 { T::one() / x.clone() } else { x.clone() };
    let mut n = e.unsigned_abs();
    let mut acc = T::one();
    while n > 0 {
        if n & 1 == 1 {
            acc = acc * base.clone();
        }
        base = base.clone() * base;
        n >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_forms() {
        assert_eq!(parse_rational("3/4").unwrap(), rat(3, 4));
        assert_eq!(parse_rational("2").unwrap(), rat_int(2));
        assert_eq!(parse_rational("0.25").unwrap(), rat(1, 4));
        assert_eq!(parse_rational("-1.5").unwrap(), rat(-3, 2));
        assert!(parse_rational("x/2").is_err());
    }

    #[test]
    fn format_always_has_denominator() {
        assert_eq!(format_rational(&rat_int(3)), "3/1");
        assert_eq!(format_rational(&rat(-2, 6)), "-1/3");
    }

    #[test]
    fn i_powers_cycle() {
        assert_eq!(i_pow(4), i_pow(0));
        assert_eq!(i_pow(-1), i_pow(3));
        assert_eq!(i_pow(1) * i_pow(1), i_pow(2));
    }

    #[test]
    fn powi_negative() {
        assert_eq!(powi(&rat(2, 3), -2), rat(9, 4));
        assert_eq!(powi(&2.0f64, 10), 1024.0);
    }
}
