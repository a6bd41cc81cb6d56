//! Exact combinatorics: Stirling numbers, factorial polynomials,
//! variance-parameter Hermite polynomials and the Poisson generator matrix.

use num_bigint::BigInt;
use num_traits::{One, Zero};

use crate::algebra::{Poly1, SquareMatrix};
use crate::error::{invalid, Result};
use crate::scalar::{i_pow, real, Field, GaussRational, Rational};

pub const MAX_STIRLING: usize = 64;
pub const MAX_GENERATOR: usize = 16;

/// Table `t[k][l] = {k brace l}` for `0 ≤ l ≤ k ≤ n`.
pub fn stirling2_table(n: usize) -> Vec<Vec<BigInt>> {
    let mut t = vec![vec![BigInt::zero(); n + 1]; n + 1];
    t[0][0] = BigInt::one();
    for k in 0..n {
        for l in 1..=k + 1 {
            t[k + 1][l] = BigInt::from(l) * &t[k][l] + &t[k][l - 1];
        }
    }
    t
}

/// Table `t[k][l] = s(k, l)`, signed Stirling numbers of the first kind.
pub fn stirling1_table(n: usize) -> Vec<Vec<BigInt>> {
    let mut t = vec![vec![BigInt::zero(); n + 1]; n + 1];
    t[0][0] = BigInt::one();
    for k in 0..n {
        for l in 1..=k + 1 {
            t[k + 1][l] = &t[k][l - 1] - BigInt::from(k) * &t[k][l];
        }
    }
    t
}

fn check_range(k: usize, l: usize) -> Result<()> {
    if k > MAX_STIRLING || l > MAX_STIRLING {
        return invalid(format!("Stirling indices must be at most {MAX_STIRLING}, got ({k}, {l})"));
    }
    Ok(())
}

pub fn stirling2(k: usize, l: usize) -> Result<BigInt> {
    check_range(k, l)?;
    if l > k {
        return Ok(BigInt::zero());
    }
    Ok(stirling2_table(k)[k][l].clone())
}

pub fn stirling1_signed(k: usize, l: usize) -> Result<BigInt> {
    check_range(k, l)?;
    if l > k {
        return Ok(BigInt::zero());
    }
    Ok(stirling1_table(k)[k][l].clone())
}

/// `C(n, k)`, zero for `k < 0` or `k > n`.
pub fn binomial(n: i64, k: i64) -> BigInt {
    if k < 0 || n < 0 || k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Checks `l·{k,l} = Σ_{j=l}^{k} C(k, j-1) (-1)^{k-j} {j,l}` for every `l ≤ k`.
pub fn stirling_identity_check(k: usize) -> bool {
    let s2 = stirling2_table(k);
    (0..=k).all(|l| {
        let lhs = BigInt::from(l) * &s2[k][l];
        let rhs = (l..=k).fold(BigInt::zero(), |acc, j| {
            let term = binomial(k as i64, j as i64 - 1) * &s2[j][l];
            if (k - j).is_multiple_of(2) {
                acc + term
            } else {
                acc - term
            }
        });
        lhs == rhs
    })
}

/// `x^{(n)} = x(x+1)…(x+n-1)`.
pub fn rising_factorial<T: Field>(x: &T, n: usize) -> T {
    let mut acc = T::one();
    let mut shift = T::zero();
    for _ in 0..n {
        acc = acc * (x.clone() + shift.clone());
        shift = shift + T::one();
    }
    acc
}

/// `(x)_{n,a} = x(x - 1/a)(x - 2/a)…(x - (n-1)/a)`.
pub fn falling_factorial<T: Field>(n: usize, a: &T) -> Poly1<T> {
    let step = T::one() / a.clone();
    let mut p = Poly1::one();
    let mut offset = T::zero();
    for _ in 0..n {
        p = &p * &Poly1::new(vec![-offset.clone(), T::one()]);
        offset = offset + step.clone();
    }
    p
}

/// Monic Hermite polynomial orthogonal for the centred normal law of
/// variance `v`: `h_0 = 1`, `h_{n+1} = x·h_n − v·h_n'`.
pub fn hermite_var<T: Field>(n: usize, v: &T) -> Poly1<T> {
    let mut h = Poly1::one();
    for _ in 0..n {
        h = &(&h * &Poly1::x()) - &h.derivative().scale(v);
    }
    h
}

/// Touchard (exponential) polynomial `Σ_j {k,j} x^j`.
pub fn touchard(k: usize) -> Poly1<Rational> {
    let s2 = stirling2_table(k);
    Poly1::new(s2[k].iter().map(|c| Rational::from_integer(c.clone())).collect())
}

fn check_generator(n: usize) -> Result<()> {
    if n > MAX_GENERATOR {
        return invalid(format!("generator size must be at most {MAX_GENERATOR}, got {n}"));
    }
    Ok(())
}

/// The Poisson R-flow generator `A_{kj} = i^{k-j} C(k, j-1)` for `j ≤ k`,
/// an `(n+1)×(n+1)` lower-triangular Gaussian-rational matrix.
pub fn poisson_generator(n: usize) -> Result<SquareMatrix<GaussRational>> {
    check_generator(n)?;
    Ok(SquareMatrix::from_fn(n + 1, |k, j| {
        if j > k {
            GaussRational::zero()
        } else {
            i_pow(k as i64 - j as i64) * real(Rational::from_integer(binomial(k as i64, j as i64 - 1)))
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorDiagonalization {
    pub u: SquareMatrix<GaussRational>,
    pub d: SquareMatrix<GaussRational>,
    pub u_inv: SquareMatrix<GaussRational>,
}

/// `A = U D U⁻¹` with `U_{kj} = i^{n-k}{k,j}`, `D = diag(0,…,n)` and the
/// closed-form inverse `U⁻¹_{kj} = i^{j-n} s(k,j)`.
pub fn diagonalize_generator(n: usize) -> Result<GeneratorDiagonalization> {
    check_generator(n)?;
    let s2 = stirling2_table(n);
    let s1 = stirling1_table(n);
    let ni = n as i64;
    let u = SquareMatrix::from_fn(n + 1, |k, j| {
        i_pow(ni - k as i64) * real(Rational::from_integer(s2[k][j].clone()))
    });
    let u_inv = SquareMatrix::from_fn(n + 1, |k, j| {
        i_pow(j as i64 - ni) * real(Rational::from_integer(s1[k][j].clone()))
    });
    let d = SquareMatrix::diagonal((0..=n).map(|j| real(Rational::from_integer(j.into()))).collect());
    Ok(GeneratorDiagonalization { u, d, u_inv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{rat, rat_int};

    fn int(n: i64) -> BigInt {
        BigInt::from(n)
    }

    #[test]
    fn stirling_second_kind_values() {
        for k in 0..10 {
            assert_eq!(stirling2(k, k).unwrap(), int(1));
        }
        assert_eq!(stirling2(4, 2).unwrap(), int(7));
        assert_eq!(stirling2(3, 2).unwrap(), int(3));
        assert_eq!(stirling2(3, 0).unwrap(), int(0));
        assert_eq!(stirling2(2, 5).unwrap(), int(0));
    }

    #[test]
    fn stirling_first_kind_values() {
        for k in 0..10 {
            assert_eq!(stirling1_signed(k, k).unwrap(), int(1));
        }
        assert_eq!(stirling1_signed(2, 1).unwrap(), int(-1));
        assert_eq!(stirling1_signed(4, 2).unwrap(), int(11));
        assert_eq!(stirling1_signed(4, 1).unwrap(), int(-6));
    }

    #[test]
    fn stirling_out_of_range() {
        assert!(stirling2(65, 1).is_err());
        assert!(stirling1_signed(3, 65).is_err());
        assert!(stirling2(64, 64).is_ok());
    }

    #[test]
    fn stirling_identity_small() {
        assert!(stirling_identity_check(0));
        // k = 3, l = 2 by hand: 2·3 = −3 + 9
        let lhs = 2 * 3;
        let rhs = -(binomial(3, 1) * int(1)) + binomial(3, 2) * int(3);
        assert_eq!(int(lhs), rhs);
        assert!((0..=15).all(stirling_identity_check));
    }

    #[test]
    fn falling_factorial_values() {
        assert_eq!(falling_factorial(0, &rat(1, 3)), Poly1::one());
        let p = falling_factorial(3, &rat_int(1));
        assert_eq!(p.coeffs(), &[rat_int(0), rat_int(2), rat_int(-3), rat_int(1)]);
        let v = rat(1, 4);
        let q = falling_factorial(2, &v);
        assert_eq!(q.coeffs(), &[rat_int(0), rat_int(-4), rat_int(1)]);
    }

    #[test]
    fn hermite_values() {
        let v = rat(1, 3);
        assert_eq!(hermite_var(1, &v).coeffs(), &[rat_int(0), rat_int(1)]);
        assert_eq!(hermite_var(2, &v).coeffs(), &[-v.clone(), rat_int(0), rat_int(1)]);
        assert_eq!(
            hermite_var(3, &v).coeffs(),
            &[rat_int(0), -rat_int(3) * v.clone(), rat_int(0), rat_int(1)]
        );
        let hf = hermite_var(4, &1.0f64);
        assert_eq!(hf.coeffs(), &[3.0, 0.0, -6.0, 0.0, 1.0]);
    }

    #[test]
    fn generator_small_cases() {
        let a1 = poisson_generator(1).unwrap();
        assert_eq!(a1, SquareMatrix::diagonal(vec![real(rat_int(0)), real(rat_int(1))]));
        let a2 = poisson_generator(2).unwrap();
        assert_eq!(*a2.get(2, 1), i_pow(1));
        assert_eq!(*a2.get(2, 2), real(rat_int(2)));
        assert_eq!(*a2.get(1, 1), real(rat_int(1)));
        assert!(a2.get(2, 0).is_zero());
        assert!(a2.get(0, 1).is_zero());
    }

    #[test]
    fn generator_diagonalizes_n2() {
        let dg = diagonalize_generator(2).unwrap();
        assert_eq!(&dg.u * &dg.u_inv, SquareMatrix::identity(3));
        let a = &(&dg.u * &dg.d) * &dg.u_inv;
        assert_eq!(a, poisson_generator(2).unwrap());
    }

    #[test]
    fn rising_factorial_values() {
        assert_eq!(rising_factorial(&rat(1, 2), 3), rat(15, 8));
        assert_eq!(rising_factorial(&rat_int(1), 4), rat_int(24));
    }
}
