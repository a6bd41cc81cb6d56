//! Conditional expectations of cell monomials under coarse-graining.
//!
//! Two independent routes compute `E[Π x_{q_i}^{k_i} | x_p]` as an exact
//! polynomial in `x_p`:
//! * [`cond_exp_closed`]: the R-matrix moment formula for one child and an
//!   iterated two-cell reduction for several;
//! * [`cond_exp_oracle`]: moments of the conditional law of the child totals
//!   given the parent total (multinomial, Dirichlet, Gaussian bridge).
//!
//! Internally everything is done in totals `t = |q| x_q`, `s = |p| x_p`.

use std::collections::HashMap;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rayon::prelude::*;

use crate::algebra::Poly1;
use crate::combinat::{binomial, falling_factorial, rising_factorial, stirling2_table};
use crate::error::{invalid, Error, Result};
use crate::lattice::{coarsen_field, FieldConfig, Partition};
use crate::noise::{sample_replica, Noise};
use crate::rmatrix::{r_matrix_pair, MAX_ORDER};
use crate::scalar::{i_pow, powi, Rational, Real};

pub const MAX_CELLS: usize = 8;

/// `Π x_{q_i}^{k_i}` for disjoint children `q_i` of a parent `p`. Whatever
/// part of `p` is not covered by the `q_i` acts as one implicit extra child.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialSpec {
    exponents: Vec<u32>,
    volumes: Vec<Rational>,
    parent: Rational,
}

impl MonomialSpec {
    pub fn new(exponents: Vec<u32>, volumes: Vec<Rational>, parent: Rational) -> Result<Self> {
        if exponents.len() != volumes.len() {
            return invalid(format!("{} exponents for {} volumes", exponents.len(), volumes.len()));
        }
        if exponents.len() > MAX_CELLS {
            return invalid(format!("at most {MAX_CELLS} cells supported"));
        }
        if parent <= Rational::zero() || volumes.iter().any(|v| *v <= Rational::zero()) {
            return invalid("volumes must be positive");
        }
        let degree: u32 = exponents.iter().sum();
        if degree as usize > MAX_ORDER {
            return invalid(format!("total degree {degree} exceeds {MAX_ORDER}"));
        }
        let spec = MonomialSpec { exponents, volumes, parent };
        if spec.deficit().is_negative() {
            return invalid("child volumes exceed the parent volume");
        }
        Ok(spec)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn volumes(&self) -> &[Rational] {
        &self.volumes
    }

    pub fn parent(&self) -> &Rational {
        &self.parent
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    /// Volume of the implicit child.
    pub fn deficit(&self) -> Rational {
        self.volumes.iter().fold(self.parent.clone(), |acc, v| acc - v)
    }

    /// Converts a polynomial in the parent total `s` into one in `x_p`, and
    /// divides by `Π |q_i|^{k_i}`.
    fn totals_to_values(&self, in_s: Poly1<Rational>) -> Poly1<Rational> {
        let scale = self
            .exponents
            .iter()
            .zip(&self.volumes)
            .fold(Rational::one(), |acc, (k, v)| acc * powi(v, *k as i64));
        in_s.rescale_arg(&self.parent).scale(&scale.recip())
    }
}

fn poly_s_power(m: usize) -> Poly1<Rational> {
    Poly1::monomial(Rational::one(), m)
}

/// `E[t^k | s]` for one child of volume `mu` inside a parent of volume
/// `lambda`, from the R matrix: coefficients `i^k (-i)^ℓ R_{kℓ}(μ,λ)`.
pub fn child_moment(noise: Noise, k: usize, mu: &Rational, lambda: &Rational) -> Result<Poly1<Rational>> {
    let r = r_matrix_pair(noise, k, mu, lambda)?;
    let mut coeffs = Vec::with_capacity(k + 1);
    for l in 0..=k {
        let c = i_pow(k as i64) * i_pow(-(l as i64)) * r.get(k, l).clone();
        if !c.im.is_zero() {
            return Err(Error::Domain(format!("conditional moment picked up an imaginary part at s^{l}")));
        }
        coeffs.push(c.re);
    }
    Ok(Poly1::new(coeffs))
}

/// Closed-form route, in totals.
fn closed_totals(noise: Noise, exps: &[u32], vols: &[Rational], parent: &Rational) -> Result<Poly1<Rational>> {
    let Some((&k1, rest_exps)) = exps.split_first() else {
        return Ok(Poly1::one());
    };
    let q1 = &vols[0];
    if rest_exps.iter().all(|&k| k == 0) {
        return child_moment(noise, k1 as usize, q1, parent);
    }
    // Condition the remaining cells on the total of r = p \ q1 first; then
    // E[t1^{k1} (s - t1)^m | s] = Σ_j C(m,j)(-1)^j s^{m-j} E[t1^{k1+j} | s].
    let r_vol = parent - q1;
    let inner = closed_totals(noise, rest_exps, &vols[1..], &r_vol)?;
    let top = k1 as usize + inner.degree().unwrap_or(0);
    let moments: Vec<Poly1<Rational>> = (0..=top)
        .map(|n| child_moment(noise, n, q1, parent))
        .collect::<Result<_>>()?;
    let mut out = Poly1::zero();
    for (m, g) in inner.coeffs().iter().enumerate() {
        if g.is_zero() {
            continue;
        }
        for j in 0..=m {
            let c = Rational::from_integer(binomial(m as i64, j as i64)) * if j % 2 == 0 { g.clone() } else { -g.clone() };
            let term = &poly_s_power(m - j) * &moments[k1 as usize + j];
            out = &out + &term.scale(&c);
        }
    }
    Ok(out)
}

/// `E[Π x_{q_i}^{k_i} | x_p]` via the R-matrix formulas.
pub fn cond_exp_closed(noise: Noise, spec: &MonomialSpec) -> Result<Poly1<Rational>> {
    let in_s = closed_totals(noise, &spec.exponents, &spec.volumes, &spec.parent)?;
    Ok(spec.totals_to_values(in_s))
}

/// Conditional law of the child totals given the parent total `s`.
#[derive(Debug, Clone)]
pub struct CondLaw {
    pub noise: Noise,
    pub volumes: Vec<Rational>,
    pub parent: Rational,
}

impl CondLaw {
    /// `E[Π t_i^{k_i} | s]` as a polynomial in `s`.
    pub fn moment(&self, exps: &[u32]) -> Poly1<Rational> {
        match self.noise {
            Noise::Poisson => self.multinomial_moment(exps),
            Noise::Gamma => self.dirichlet_moment(exps),
            Noise::Gauss => self.bridge_moment(exps),
        }
    }

    fn fraction(&self, i: usize) -> Rational {
        self.volumes[i].clone() / self.parent.clone()
    }

    /// `t^k = Σ_j {k,j}(t)_j` and `E[Π (t_i)_{j_i} | s] = (s)_J Π c_i^{j_i}`.
    fn multinomial_moment(&self, exps: &[u32]) -> Poly1<Rational> {
        let kmax = exps.iter().copied().max().unwrap_or(0) as usize;
        let s2 = stirling2_table(kmax);
        let mut out = Poly1::zero();
        let mut js = vec![0usize; exps.len()];
        loop {
            let mut weight = Rational::one();
            for (i, (&k, &j)) in exps.iter().zip(&js).enumerate() {
                weight *= Rational::from_integer(s2[k as usize][j].clone()) * powi(&self.fraction(i), j as i64);
            }
            if !weight.is_zero() {
                let total: usize = js.iter().sum();
                out = &out + &falling_factorial(total, &Rational::one()).scale(&weight);
            }
            // odometer over 0 ≤ j_i ≤ k_i
            let mut i = 0;
            loop {
                if i == js.len() {
                    return out;
                }
                if js[i] < exps[i] as usize {
                    js[i] += 1;
                    break;
                }
                js[i] = 0;
                i += 1;
            }
        }
    }

    /// `t_i = s w_i` with `w` Dirichlet; `E[Π w_i^{k_i}] = Π |q_i|^{(k_i)} / |p|^{(K)}`.
    fn dirichlet_moment(&self, exps: &[u32]) -> Poly1<Rational> {
        let total: u32 = exps.iter().sum();
        let num = exps
            .iter()
            .zip(&self.volumes)
            .fold(Rational::one(), |acc, (k, v)| acc * rising_factorial(v, *k as usize));
        Poly1::monomial(num / rising_factorial(&self.parent, total as usize), total as usize)
    }

    /// Gaussian with means `c_i s` and covariance `|q_i|δ_{ij} - |q_i||q_j|/|p|`,
    /// by the Gaussian integration-by-parts recursion.
    fn bridge_moment(&self, exps: &[u32]) -> Poly1<Rational> {
        let n = exps.len();
        let cov = |i: usize, j: usize| {
            let d = if i == j { self.volumes[i].clone() } else { Rational::zero() };
            d - self.volumes[i].clone() * self.volumes[j].clone() / self.parent.clone()
        };
        let means: Vec<Poly1<Rational>> = (0..n).map(|i| Poly1::monomial(self.fraction(i), 1)).collect();
        let mut memo: HashMap<Vec<u32>, Poly1<Rational>> = HashMap::new();
        fn go(
            counts: Vec<u32>,
            means: &[Poly1<Rational>],
            cov: &dyn Fn(usize, usize) -> Rational,
            memo: &mut HashMap<Vec<u32>, Poly1<Rational>>,
        ) -> Poly1<Rational> {
            if let Some(v) = memo.get(&counts) {
                return v.clone();
            }
            let Some(a) = counts.iter().position(|&c| c > 0) else {
                return Poly1::one();
            };
            let mut rest = counts.clone();
            rest[a] -= 1;
            let mut out = &means[a] * &go(rest.clone(), means, cov, memo);
            for b in 0..rest.len() {
                if rest[b] == 0 {
                    continue;
                }
                let c = cov(a, b);
                if c.is_zero() {
                    continue;
                }
                let mut fewer = rest.clone();
                fewer[b] -= 1;
                let w = c * Rational::from_integer(BigInt::from(rest[b]));
                out = &out + &go(fewer, means, cov, memo).scale(&w);
            }
            memo.insert(counts, out.clone());
            out
        }
        go(exps.to_vec(), &means, &cov, &mut memo)
    }
}

/// `E[Π x_{q_i}^{k_i} | x_p]` from the conditional law.
pub fn cond_exp_oracle(noise: Noise, spec: &MonomialSpec) -> Result<Poly1<Rational>> {
    let law = CondLaw { noise, volumes: spec.volumes.clone(), parent: spec.parent.clone() };
    Ok(spec.totals_to_values(law.moment(&spec.exponents)))
}

/// Applies `E[· | x_p]` to a polynomial in a single child value `x_q`.
pub fn cond_exp_poly(noise: Noise, poly: &Poly1<Rational>, child: &Rational, parent: &Rational) -> Result<Poly1<Rational>> {
    let mut out = Poly1::zero();
    for (k, c) in poly.coeffs().iter().enumerate() {
        if c.is_zero() {
            continue;
        }
        let spec = MonomialSpec::new(vec![k as u32], vec![child.clone()], parent.clone())?;
        out = &out + &cond_exp_closed(noise, &spec)?.scale(c);
    }
    Ok(out)
}

pub const MIN_BIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct McBin {
    /// Lower edge of the bin in `x_p`.
    pub lower: f64,
    pub count: usize,
    pub mean: f64,
    pub std_error: f64,
    pub z: f64,
    /// Fewer than [`MIN_BIN_SAMPLES`] samples; excluded from `max_abs_z`.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub samples: usize,
    pub bins: Vec<McBin>,
    pub pooled_z: f64,
    pub max_abs_z: f64,
}

fn z_score(mean: f64, var: f64, n: usize) -> (f64, f64) {
    let se = (var / n as f64).sqrt();
    let z = if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(mean)
    };
    (se, z)
}

/// Monte Carlo test of `E[a_Q | P] = a_P`. Samples fine fields on `fine`,
/// forms `a_Q(x) - a_P(π x)` and bins it by the coarse value of cell
/// `bin_cell`; each bin mean should be zero. Sample `j` is replica `j` of
/// `seed`, so the result is independent of the thread count.
pub fn martingale_mc<FQ, FP>(
    noise: Noise,
    fine: &Partition,
    coarse_level: u32,
    bin_cell: usize,
    a_fine: FQ,
    a_coarse: FP,
    seed: u64,
    n_samples: usize,
) -> Result<McReport>
where
    FQ: Fn(&FieldConfig<f64>) -> f64 + Sync,
    FP: Fn(&FieldConfig<f64>) -> f64 + Sync,
{
    if coarse_level > fine.level() {
        return invalid("coarse level finer than the sampled partition");
    }
    if n_samples < 2 {
        return invalid("need at least two samples");
    }
    if bin_cell >= (1usize << (coarse_level as usize * fine.dim())) {
        return invalid(format!("bin cell {bin_cell} out of range"));
    }
    let coarse_vol = crate::lattice::cell_volume(fine.domain(), coarse_level).as_f64();
    let draws: Vec<(f64, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|j| {
            let x = sample_replica(fine, noise, seed, j);
            let px = coarsen_field(&x, coarse_level).expect("coarse level checked");
            (px.values[bin_cell], a_fine(&x) - a_coarse(&px))
        })
        .collect();

    let width = match noise {
        Noise::Poisson => 1.0 / coarse_vol,
        Noise::Gauss | Noise::Gamma => 0.1 / coarse_vol.sqrt(),
    };
    let key = |v: f64| match noise {
        Noise::Poisson => (v * coarse_vol).round() as i64,
        _ => (v / width).floor() as i64,
    };
    let mut groups: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
    for (v, d) in &draws {
        groups.entry(key(*v)).or_default().push(*d);
    }
    let stats = |ds: &[f64]| {
        let n = ds.len();
        let mean = ds.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0) } else { 0.0 };
        (mean, var)
    };
    let mut bins = Vec::with_capacity(groups.len());
    let mut max_abs_z = 0.0f64;
    for (k, ds) in &groups {
        let (mean, var) = stats(ds);
        let (std_error, z) = z_score(mean, var, ds.len());
        let flagged = ds.len() < MIN_BIN_SAMPLES;
        if !flagged {
            max_abs_z = max_abs_z.max(z.abs());
        }
        let lower = match noise {
            Noise::Poisson => *k as f64 / coarse_vol,
            _ => *k as f64 * width,
        };
        bins.push(McBin { lower, count: ds.len(), mean, std_error, z, flagged });
    }
    let all: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let (mean, var) = stats(&all);
    let pooled_z = z_score(mean, var, all.len()).1;
    Ok(McReport { samples: n_samples, bins, pooled_z, max_abs_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{make_partition, Domain};
    use crate::scalar::{rat, rat_int};

    fn p(coeffs: &[Rational]) -> Poly1<Rational> {
        Poly1::new(coeffs.to_vec())
    }

    fn both(noise: Noise, exps: Vec<u32>, vols: Vec<Rational>, parent: Rational) -> Poly1<Rational> {
        let spec = MonomialSpec::new(exps, vols, parent).unwrap();
        let closed = cond_exp_closed(noise, &spec).unwrap();
        assert_eq!(closed, cond_exp_oracle(noise, &spec).unwrap(), "{noise} {spec:?}");
        closed
    }

    #[test]
    fn first_moment_is_parent_value() {
        for n in Noise::ALL {
            let e = both(n, vec![1], vec![rat(1, 3)], rat_int(1));
            assert_eq!(e, Poly1::monomial(rat_int(1), 1));
        }
    }

    #[test]
    fn second_moment_anchors() {
        let (q, pp) = (rat(1, 4), rat(3, 2));
        let poisson = both(Noise::Poisson, vec![2], vec![q.clone()], pp.clone());
        // x/|q| + x(x - 1/|p|)
        let expect = p(&[rat_int(0), q.recip() - pp.recip(), rat_int(1)]);
        assert_eq!(poisson, expect);
        let gauss = both(Noise::Gauss, vec![2], vec![q.clone()], pp.clone());
        assert_eq!(gauss, p(&[q.recip() - pp.recip(), rat_int(0), rat_int(1)]));
    }

    #[test]
    fn product_anchors() {
        let pp = rat(5, 4);
        let vols = vec![rat(1, 4), rat(1, 2)];
        let gamma = both(Noise::Gamma, vec![1, 1], vols.clone(), pp.clone());
        assert_eq!(gamma, Poly1::monomial(pp.clone() / (pp.clone() + rat_int(1)), 2));
        let poisson = both(Noise::Poisson, vec![1, 1], vols.clone(), pp.clone());
        assert_eq!(poisson, p(&[rat_int(0), -pp.recip(), rat_int(1)]));
        let gauss = both(Noise::Gauss, vec![1, 1], vols, pp.clone());
        assert_eq!(gauss, p(&[-pp.recip(), rat_int(0), rat_int(1)]));
    }

    #[test]
    fn whole_parent_is_identity() {
        for n in Noise::ALL {
            let e = both(n, vec![4], vec![rat(2, 3)], rat(2, 3));
            assert_eq!(e, Poly1::monomial(rat_int(1), 4));
        }
    }

    #[test]
    fn degree_preserved_with_full_leading_terms() {
        for n in Noise::ALL {
            let e = both(n, vec![2, 0, 3], vec![rat(1, 5), rat(1, 5), rat(2, 5)], rat_int(1));
            assert_eq!(e.degree(), Some(5));
        }
    }

    #[test]
    fn tower_property() {
        for n in Noise::ALL {
            let (q, r, pp) = (rat(1, 6), rat(1, 2), rat(3, 2));
            for k in 1..=5 {
                let mono = Poly1::monomial(rat_int(1), k);
                let inner = cond_exp_poly(n, &mono, &q, &r).unwrap();
                let two_step = cond_exp_poly(n, &inner, &r, &pp).unwrap();
                assert_eq!(two_step, cond_exp_poly(n, &mono, &q, &pp).unwrap(), "{n} k={k}");
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MonomialSpec::new(vec![1, 1], vec![rat(2, 3), rat(2, 3)], rat_int(1)).is_err());
        assert!(MonomialSpec::new(vec![1], vec![rat(1, 2), rat(1, 2)], rat_int(1)).is_err());
        assert!(MonomialSpec::new(vec![9], vec![rat(1, 2)], rat_int(1)).is_err());
        assert!(MonomialSpec::new(vec![1], vec![rat(0, 1)], rat_int(1)).is_err());
    }

    #[test]
    fn mc_single_cell_and_constant() {
        let fine = make_partition(&Domain::unit(1).unwrap(), 1).unwrap();
        for n in Noise::ALL {
            let r = martingale_mc(n, &fine, 0, 0, |x| x.values[0], |px| px.values[0], 5, 20_000).unwrap();
            assert!(r.max_abs_z <= 4.0, "{n} {}", r.max_abs_z);
            assert!(r.pooled_z.abs() <= 4.0);
            let c = martingale_mc(n, &fine, 0, 0, |_| 3.0, |_| 3.0, 5, 1000).unwrap();
            assert!(c.bins.iter().all(|b| b.z == 0.0));
        }
    }
}
