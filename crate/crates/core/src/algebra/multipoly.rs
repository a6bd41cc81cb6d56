use std::collections::BTreeMap;

use crate::algebra::Poly1;
use crate::scalar::Field;

/// Exponent vector over variable indices, sorted, zero exponents omitted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Monomial(Vec<(usize, u32)>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(Vec::new())
    }

    pub fn var(index: usize, power: u32) -> Self {
        if power == 0 {
            Self::one()
        } else {
            Monomial(vec![(index, power)])
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut acc: BTreeMap<usize, u32> = BTreeMap::new();
        for (v, e) in pairs {
            *acc.entry(v).or_insert(0) += e;
        }
        Monomial(acc.into_iter().filter(|&(_, e)| e > 0).collect())
    }

    pub fn factors(&self) -> &[(usize, u32)] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&(_, e)| e).sum()
    }

    pub fn power_of(&self, index: usize) -> u32 {
        self.0
            .iter()
            .find(|&&(v, _)| v == index)
            .map_or(0, |&(_, e)| e)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial::from_pairs(self.0.iter().chain(other.0.iter()).copied())
    }

    pub fn map_vars(&self, f: impl Fn(usize) -> usize) -> Monomial {
        Monomial::from_pairs(self.0.iter().map(|&(v, e)| (f(v), e)))
    }
}

/// Sparse multivariate polynomial. Variables are indexed by `usize`
/// (cell indices of a partition, for field observables).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPoly<T> {
    terms: BTreeMap<Monomial, T>,
}

impl<T: Field> Default for MultiPoly<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Field> MultiPoly<T> {
    pub fn zero() -> Self {
        MultiPoly { terms: BTreeMap::new() }
    }

    pub fn constant(c: T) -> Self {
        let mut p = Self::zero();
        p.add_term(Monomial::one(), c);
        p
    }

    pub fn var(index: usize) -> Self {
        Self::term(Monomial::var(index, 1), T::one())
    }

    pub fn term(m: Monomial, c: T) -> Self {
        let mut p = Self::zero();
        p.add_term(m, c);
        p
    }

    /// Embeds a univariate polynomial in variable `index`.
    pub fn from_univariate(index: usize, p: &Poly1<T>) -> Self {
        let mut out = Self::zero();
        for (k, c) in p.coeffs().iter().enumerate() {
            out.add_term(Monomial::var(index, k as u32), c.clone());
        }
        out
    }

    pub fn add_term(&mut self, m: Monomial, c: T) {
        if c.is_zero() {
            return;
        }
        match self.terms.get_mut(&m) {
            Some(v) => {
                *v = v.clone() + c;
                if v.is_zero() {
                    self.terms.remove(&m);
                }
            }
            None => {
                self.terms.insert(m, c);
            }
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &T)> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, m: &Monomial) -> T {
        self.terms.get(m).cloned().unwrap_or_else(T::zero)
    }

    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(Monomial::degree).max()
    }

    pub fn variables(&self) -> Vec<usize> {
        let mut vs: Vec<usize> = self
            .terms
            .keys()
            .flat_map(|m| m.factors().iter().map(|&(v, _)| v))
            .collect();
        vs.sort_unstable();
        vs.dedup();
        vs
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(&-T::one()))
    }

    pub fn scale(&self, c: &T) -> Self {
        let mut out = Self::zero();
        for (m, a) in &self.terms {
            out.add_term(m.clone(), a.clone() * c.clone());
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for (m1, a) in &self.terms {
            for (m2, b) in &other.terms {
                out.add_term(m1.mul(m2), a.clone() * b.clone());
            }
        }
        out
    }

    pub fn partial(&self, index: usize) -> Self {
        let mut out = Self::zero();
        for (m, c) in &self.terms {
            let e = m.power_of(index);
            if e == 0 {
                continue;
            }
            let reduced = Monomial::from_pairs(
                m.factors()
                    .iter()
                    .map(|&(v, p)| if v == index { (v, p - 1) } else { (v, p) }),
            );
            let mut k = T::zero();
            for _ in 0..e {
                k = k + T::one();
            }
            out.add_term(reduced, c.clone() * k);
        }
        out
    }

    /// Evaluates with `values[i]` substituted for variable `i`.
    pub fn eval(&self, values: &[T]) -> T {
        self.eval_as(values, T::clone)
    }

    /// Evaluates in another field after coefficient conversion.
    pub fn eval_as<U: Field>(&self, values: &[U], conv: impl Fn(&T) -> U) -> U {
        let mut total = U::zero();
        for (m, c) in &self.terms {
            let mut t = conv(c);
            for &(v, e) in m.factors() {
                for _ in 0..e {
                    t = t * values[v].clone();
                }
            }
            total = total + t;
        }
        total
    }

    pub fn map<U: Field>(&self, f: impl Fn(&T) -> U) -> MultiPoly<U> {
        let mut out = MultiPoly::zero();
        for (m, c) in &self.terms {
            out.add_term(m.clone(), f(c));
        }
        out
    }

    /// Renames variables; terms that collide are summed.
    pub fn map_vars(&self, f: impl Fn(usize) -> usize) -> Self {
        let mut out = Self::zero();
        for (m, c) in &self.terms {
            out.add_term(m.map_vars(&f), c.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_cancellation() {
        let x = MultiPoly::<f64>::var(0);
        let y = MultiPoly::<f64>::var(3);
        let s = x.add(&y);
        let d = x.sub(&y);
        let p = s.mul(&d);
        // x^2 - y^2
        assert_eq!(p.len(), 2);
        assert_eq!(p.eval(&[2.0, 0.0, 0.0, 1.0]), 3.0);
        assert!(p.sub(&p).is_empty());
    }

    #[test]
    fn partial_derivative() {
        let p = MultiPoly::term(Monomial::from_pairs([(0, 3), (1, 1)]), 2.0);
        let dp = p.partial(0);
        assert_eq!(dp.coeff(&Monomial::from_pairs([(0, 2), (1, 1)])), 6.0);
        assert!(p.partial(5).is_empty());
    }

    #[test]
    fn monomial_normal_form() {
        let a = Monomial::from_pairs([(2, 1), (0, 2), (2, 0)]);
        assert_eq!(a.factors(), &[(0, 2), (2, 1)]);
        assert_eq!(a.mul(&Monomial::var(2, 2)).power_of(2), 3);
    }
}
