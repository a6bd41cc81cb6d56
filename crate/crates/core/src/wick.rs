//! Wick powers and products, the S- and T-transforms, chaos kernels and the
//! `exp^⋄` closure `φ = μ̂ · e^{Sa}`.
//!
//! Polynomials in cell values come in two bases: the ordinary monomial basis
//! `Π x_p^{m_p}` and the Wick basis `Π x_p^{⋄n_p}`. A [`WickPolynomial`] is
//! a [`MultiPoly`] whose variable indices are cell indices; which basis it is
//! written in is up to the caller.

use std::collections::BTreeMap;

use num_traits::{One, Zero};
use rayon::prelude::*;

use crate::algebra::{MultiPoly, Poly1};
use crate::combinat::{falling_factorial, hermite_var, rising_factorial, stirling1_table};
use crate::condexp::{cond_exp_closed, MonomialSpec};
use crate::error::{invalid, Error, Result};
use crate::lattice::Partition;
use crate::noise::{basis_variable, derivative_basis, log_charfn, sample_replica, Noise, C64};
use crate::scalar::{gauss_to_f64, powi, real, GaussRational, Rational, Real};

pub type WickPolynomial<T> = MultiPoly<T>;

pub const MAX_POWER: usize = 10;

fn check_power(n: usize, vol: &Rational) -> Result<()> {
    if n > MAX_POWER {
        return invalid(format!("power {n} exceeds {MAX_POWER}"));
    }
    if *vol <= Rational::zero() {
        return invalid("cell volume must be positive");
    }
    Ok(())
}

fn gamma_factor(n: usize, vol: &Rational) -> Rational {
    powi(vol, n as i64) / rising_factorial(vol, n)
}

/// `x_p^{⋄n}` as a polynomial in `x_p`: `H_n^{1/|p|}` (Gauss), `(x)_{n,|p|}`
/// (Poisson), `|p|^n/|p|^{(n)} x^n` (Gamma).
pub fn wick_power(noise: Noise, n: usize, vol: &Rational) -> Result<Poly1<Rational>> {
    check_power(n, vol)?;
    Ok(match noise {
        Noise::Gauss => hermite_var(n, &vol.recip()),
        Noise::Poisson => falling_factorial(n, vol),
        Noise::Gamma => Poly1::monomial(gamma_factor(n, vol), n),
    })
}

/// The polynomial in a fine value `x_q` whose conditional expectation at any
/// coarser cell is the Wick power there. The Poisson case is assembled from
/// its Stirling counterterms `Σ_j s(k,j)|q|^{j-k} x^j`.
pub fn renormalized_power(noise: Noise, k: usize, vol: &Rational) -> Result<Poly1<Rational>> {
    check_power(k, vol)?;
    Ok(match noise {
        Noise::Poisson => {
            let s1 = stirling1_table(k);
            Poly1::new(
                (0..=k)
                    .map(|j| Rational::from_integer(s1[k][j].clone()) * powi(vol, j as i64 - k as i64))
                    .collect(),
            )
        }
        Noise::Gauss => hermite_var(k, &vol.recip()),
        Noise::Gamma => Poly1::monomial(gamma_factor(k, vol), k),
    })
}

/// How the factors sharing one base cell are spread over distinct children.
#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    /// `m` children of volume `|p|/m`.
    Equal,
    /// `m` children of volume `|p|/(m+extra)`, leaving part of `p` empty.
    Slack(u32),
    /// Dyadic descendants `depth` levels down in dimension `dim`.
    Dyadic { dim: usize, depth: u32 },
    /// Volumes `|p|/2, |p|/4, …`.
    Geometric,
    /// Volumes `|p|/((i+1)(i+2))`.
    Telescoping,
    /// Volumes `i|p|/(m(m+1)/2)`, `i = 1..m`.
    Increasing,
    /// Explicit fractions of `|p|`.
    Fractions(Vec<Rational>),
}

impl Placement {
    pub fn child_volumes(&self, parent: &Rational, m: usize) -> Result<Vec<Rational>> {
        let frac = |num: i64, den: i64| Rational::new(num.into(), den.into());
        let fractions: Vec<Rational> = match self {
            Placement::Equal => vec![frac(1, m as i64); m],
            Placement::Slack(extra) => vec![frac(1, (m + *extra as usize) as i64); m],
            Placement::Dyadic { dim, depth } => {
                let count = 1u64.checked_shl((*dim as u32) * depth).unwrap_or(0);
                if count < m as u64 || count == 0 {
                    return invalid(format!("{m} factors do not fit {depth} dyadic levels down in dimension {dim}"));
                }
                vec![frac(1, count as i64); m]
            }
            Placement::Geometric => (0..m).map(|i| frac(1, 1i64 << (i + 1))).collect(),
            Placement::Telescoping => (0..m).map(|i| frac(1, ((i + 1) * (i + 2)) as i64)).collect(),
            Placement::Increasing => {
                let total = (m * (m + 1) / 2) as i64;
                (1..=m).map(|i| frac(i as i64, total)).collect()
            }
            Placement::Fractions(f) => {
                if f.len() < m {
                    return invalid(format!("{} fractions for {m} factors", f.len()));
                }
                f[..m].to_vec()
            }
        };
        Ok(fractions.into_iter().map(|f| f * parent.clone()).collect())
    }

    /// A fixed battery of placements valid for `m` factors per cell.
    pub fn strategies(m: usize) -> Vec<Placement> {
        let mut all = vec![
            Placement::Equal,
            Placement::Slack(1),
            Placement::Slack(3),
            Placement::Geometric,
            Placement::Telescoping,
            Placement::Increasing,
            Placement::Dyadic { dim: 1, depth: 3 },
            Placement::Dyadic { dim: 1, depth: 5 },
            Placement::Dyadic { dim: 2, depth: 2 },
            Placement::Dyadic { dim: 3, depth: 1 },
            Placement::Dyadic { dim: 3, depth: 2 },
            Placement::Fractions((0..m).map(|i| Rational::new(1.into(), (m as i64 + 2 + i as i64).into()) / Rational::from_integer(2.into())).collect()),
        ];
        let one = Rational::one();
        all.retain(|p| p.child_volumes(&one, m).is_ok());
        all
    }
}

/// `x(𝔪_1) ⋄ ⋯ ⋄ x(𝔪_n)` at scale P, for points in the given cells, as a
/// polynomial in the cell values (variable = cell index). Factors in the
/// same cell are placed in distinct children and conditioned back.
pub fn wick_product_eval(noise: Noise, cells: &[(usize, Rational)], placement: &Placement) -> Result<WickPolynomial<Rational>> {
    if cells.len() > crate::rmatrix::MAX_ORDER {
        return invalid(format!("total degree {} exceeds {}", cells.len(), crate::rmatrix::MAX_ORDER));
    }
    let mut groups: BTreeMap<usize, (usize, Rational)> = BTreeMap::new();
    for (id, vol) in cells {
        let entry = groups.entry(*id).or_insert((0, vol.clone()));
        if entry.1 != *vol {
            return invalid(format!("cell {id} given two different volumes"));
        }
        entry.0 += 1;
    }
    let mut out = MultiPoly::constant(Rational::one());
    for (id, (m, vol)) in groups {
        let children = placement.child_volumes(&vol, m)?;
        let spec = MonomialSpec::new(vec![1; m], children, vol)?;
        out = out.mul(&MultiPoly::from_univariate(id, &cond_exp_closed(noise, &spec)?));
    }
    Ok(out)
}

/// [`wick_product_eval`] for cells of a dyadic partition.
pub fn wick_product_on_partition(noise: Noise, partition: &Partition, cells: &[usize], placement: &Placement) -> Result<WickPolynomial<Rational>> {
    let vol = partition.cell_volume();
    if let Some(bad) = cells.iter().find(|&&c| c >= partition.num_cells()) {
        return invalid(format!("cell {bad} not in the partition"));
    }
    let tagged: Vec<_> = cells.iter().map(|&c| (c, vol.clone())).collect();
    wick_product_eval(noise, &tagged, placement)
}

/// Largest coefficient difference between the results of different
/// placements (exact, converted to `f64`).
pub fn wick_product_independence_check(noise: Noise, cells: &[(usize, Rational)], placements: &[Placement]) -> Result<f64> {
    let Some((first, rest)) = placements.split_first() else {
        return invalid("need at least one placement");
    };
    let reference = wick_product_eval(noise, cells, first)?;
    let mut worst = 0.0f64;
    for p in rest {
        let diff = wick_product_eval(noise, cells, p)?.sub(&reference);
        for (_, c) in diff.terms() {
            worst = worst.max(c.as_f64().abs());
        }
    }
    Ok(worst)
}

/// `S(x_p)(ξ)`: `-iξ_p` (Gauss), `e^{-iξ_p}` (Poisson), `(1+iξ_p)^{-1}` (Gamma).
pub fn s_point(noise: Noise, xi: C64) -> Result<C64> {
    if noise == Noise::Gamma && (C64::one() + C64::i() * xi).norm() == 0.0 {
        return Err(Error::Domain("Gamma S-transform has a pole at ξ = i".into()));
    }
    Ok(match noise {
        Noise::Gauss => -C64::i() * xi,
        _ => basis_variable(noise, xi),
    })
}

/// Wick calculus over a fixed set of cells with given volumes.
#[derive(Debug, Clone)]
pub struct WickAlgebra {
    noise: Noise,
    volumes: Vec<Rational>,
}

impl WickAlgebra {
    pub fn new(noise: Noise, volumes: Vec<Rational>) -> Result<Self> {
        if volumes.iter().any(|v| *v <= Rational::zero()) {
            return invalid("cell volumes must be positive");
        }
        Ok(WickAlgebra { noise, volumes })
    }

    pub fn for_partition(noise: Noise, partition: &Partition) -> Self {
        WickAlgebra { noise, volumes: vec![partition.cell_volume(); partition.num_cells()] }
    }

    pub fn noise(&self) -> Noise {
        self.noise
    }

    pub fn volumes(&self) -> &[Rational] {
        &self.volumes
    }

    fn volume(&self, var: usize) -> Result<&Rational> {
        self.volumes.get(var).ok_or_else(|| Error::InvalidArgument(format!("variable {var} has no cell")))
    }

    /// Wick basis → ordinary monomials.
    pub fn to_ordinary(&self, a: &WickPolynomial<Rational>) -> Result<WickPolynomial<Rational>> {
        let mut out = MultiPoly::zero();
        for (m, c) in a.terms() {
            let mut term = MultiPoly::constant(c.clone());
            for &(var, n) in m.factors() {
                let w = wick_power(self.noise, n as usize, self.volume(var)?)?;
                term = term.mul(&MultiPoly::from_univariate(var, &w));
            }
            out = out.add(&term);
        }
        Ok(out)
    }

    /// `x^m = Σ_n e_{mn} x^{⋄n}` for one cell, `n ≤ m`.
    fn monomial_in_wick_basis(&self, var: usize, m: usize) -> Result<Vec<Rational>> {
        let vol = self.volume(var)?;
        let mut rows: Vec<Vec<Rational>> = Vec::with_capacity(m + 1);
        for k in 0..=m {
            let w = wick_power(self.noise, k, vol)?;
            let lead = w.coeff(k);
            let mut row = vec![Rational::zero(); k + 1];
            row[k] = lead.recip();
            for j in 0..k {
                let c = w.coeff(j);
                if c.is_zero() {
                    continue;
                }
                for (n, e) in rows[j].iter().enumerate() {
                    row[n] = row[n].clone() - c.clone() * e.clone() / lead.clone();
                }
            }
            rows.push(row);
        }
        Ok(rows.pop().unwrap())
    }

    /// Ordinary monomials → Wick basis.
    pub fn to_wick(&self, a: &WickPolynomial<Rational>) -> Result<WickPolynomial<Rational>> {
        let mut out = MultiPoly::zero();
        for (m, c) in a.terms() {
            let mut term = MultiPoly::constant(c.clone());
            for &(var, p) in m.factors() {
                let e = self.monomial_in_wick_basis(var, p as usize)?;
                term = term.mul(&MultiPoly::from_univariate(var, &Poly1::new(e)));
            }
            out = out.add(&term);
        }
        Ok(out)
    }

    /// `a ⋄ b` for ordinary-basis polynomials.
    pub fn wick_mul(&self, a: &WickPolynomial<Rational>, b: &WickPolynomial<Rational>) -> Result<WickPolynomial<Rational>> {
        let prod = self.to_wick(a)?.mul(&self.to_wick(b)?);
        self.to_ordinary(&prod)
    }

    /// S-transform of a Wick-basis polynomial: `Σ c Π s_point(ξ_p)^{n_p}`.
    pub fn s_transform_wick(&self, a: &WickPolynomial<Rational>, xi: &[C64]) -> Result<C64> {
        let points = xi.iter().map(|&x| s_point(self.noise, x)).collect::<Result<Vec<_>>>()?;
        let mut total = C64::zero();
        for (m, c) in a.terms() {
            let mut t = C64::new(c.as_f64(), 0.0);
            for &(var, n) in m.factors() {
                t *= points.get(var).ok_or_else(|| Error::InvalidArgument(format!("no ξ for cell {var}")))?.powu(n);
            }
            total += t;
        }
        Ok(total)
    }

    /// S-transform of an ordinary-basis polynomial straight from the
    /// characteristic function: `S(x_p^m) = (i/|p|)^m ν̂^{(m)}_{|p|}(ξ_p)/ν̂_{|p|}(ξ_p)`.
    /// The result is reduced exactly as a polynomial in the basis variables
    /// and evaluated once.
    pub fn s_transform(&self, a: &WickPolynomial<Rational>, xi: &[C64]) -> Result<C64> {
        let mut max_power: BTreeMap<usize, usize> = BTreeMap::new();
        for (m, _) in a.terms() {
            for &(var, p) in m.factors() {
                let e = max_power.entry(var).or_default();
                *e = (*e).max(p as usize);
            }
        }
        let mut factors: BTreeMap<usize, Vec<MultiPoly<GaussRational>>> = BTreeMap::new();
        let mut u = vec![C64::zero(); xi.len()];
        for (&var, &top) in &max_power {
            let vol = self.volume(var)?;
            let x = *xi.get(var).ok_or_else(|| Error::InvalidArgument(format!("no ξ for cell {var}")))?;
            if self.noise == Noise::Gamma {
                s_point(self.noise, x)?;
            }
            u[var] = basis_variable(self.noise, x);
            let scale = real(vol.recip()) * GaussRational::i();
            let mut pow = GaussRational::one();
            let mut vals = Vec::with_capacity(top + 1);
            for f in derivative_basis(self.noise, vol, top) {
                vals.push(MultiPoly::from_univariate(var, &f.scale(&pow)));
                pow *= scale.clone();
            }
            factors.insert(var, vals);
        }
        let mut total = MultiPoly::zero();
        for (m, c) in a.terms() {
            let mut t = MultiPoly::constant(real(c.clone()));
            for &(var, p) in m.factors() {
                t = t.mul(&factors[&var][p as usize]);
            }
            total = total.add(&t);
        }
        Ok(total.eval_as(&u, gauss_to_f64))
    }

    /// `log μ̂_P(ξ) = Σ_p log ν̂_{|p|}(ξ_p)`.
    pub fn log_mu_hat(&self, xi: &[C64]) -> Result<C64> {
        let mut total = C64::zero();
        for (v, &x) in self.volumes.iter().zip(xi) {
            total += log_charfn(self.noise, v.as_f64(), x)?;
        }
        Ok(total)
    }
}

/// Monte Carlo estimate of `T a = E[e^{-iξx} a]` and of `T a / μ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TEstimate {
    pub samples: usize,
    pub t: C64,
    /// Standard errors of the real and imaginary parts of `t`.
    pub t_se: (f64, f64),
    pub ratio: C64,
    pub ratio_se: (f64, f64),
}

/// Estimates the T-transform of an ordinary-basis polynomial over the cells
/// of `partition`, with pairing `ξx = Σ_p |p| ξ_p x_p`.
pub fn t_transform_mc(
    a: &WickPolynomial<Rational>,
    partition: &Partition,
    noise: Noise,
    xi: &[f64],
    seed: u64,
    n: usize,
) -> Result<TEstimate> {
    if xi.len() != partition.num_cells() {
        return invalid(format!("{} ξ values for {} cells", xi.len(), partition.num_cells()));
    }
    if n < 2 {
        return invalid("need at least two samples");
    }
    let vol = partition.cell_volume().as_f64();
    let af = a.map(|c| c.as_f64());
    let draws: Vec<C64> = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let x = sample_replica(partition, noise, seed, j);
            let phase: f64 = x.values.iter().zip(xi).map(|(v, k)| vol * k * v).sum();
            C64::new(0.0, -phase).exp() * af.eval(&x.values)
        })
        .collect();
    let algebra = WickAlgebra::for_partition(noise, partition);
    let xs: Vec<C64> = xi.iter().map(|&k| C64::new(k, 0.0)).collect();
    let mu_hat = algebra.log_mu_hat(&xs)?.exp();
    let (t, t_se) = complex_mean(&draws);
    let scaled: Vec<C64> = draws.iter().map(|d| d / mu_hat).collect();
    let (ratio, ratio_se) = complex_mean(&scaled);
    Ok(TEstimate { samples: n, t, t_se, ratio, ratio_se })
}

fn complex_mean(draws: &[C64]) -> (C64, (f64, f64)) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<C64>() / n;
    let (mut vr, mut vi) = (0.0, 0.0);
    for d in draws {
        vr += (d.re - mean.re).powi(2);
        vi += (d.im - mean.im).powi(2);
    }
    (mean, ((vr / (n - 1.0) / n).sqrt(), (vi / (n - 1.0) / n).sqrt()))
}

pub const MAX_KERNEL_ENTRIES: usize = 1 << 24;

/// A symmetric order-`k` tensor over the cells of a base partition, stored
/// densely in row-major order (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFamily {
    partition: Partition,
    order: usize,
    data: Vec<f64>,
}

fn tensor_len(cells: usize, order: usize) -> Result<usize> {
    let mut len = 1usize;
    for _ in 0..order {
        len = len
            .checked_mul(cells)
            .filter(|&l| l <= MAX_KERNEL_ENTRIES)
            .ok_or_else(|| Error::InvalidArgument(format!("order-{order} kernel over {cells} cells is too large")))?;
    }
    Ok(len)
}

impl KernelFamily {
    pub fn new(partition: Partition, order: usize, data: Vec<f64>) -> Result<Self> {
        let len = tensor_len(partition.num_cells(), order)?;
        if data.len() != len {
            return invalid(format!("expected {len} kernel entries, got {}", data.len()));
        }
        Ok(KernelFamily { partition, order, data })
    }

    pub fn zeros(partition: Partition, order: usize) -> Result<Self> {
        let len = tensor_len(partition.num_cells(), order)?;
        Ok(KernelFamily { partition, order, data: vec![0.0; len] })
    }

    pub fn from_fn(partition: Partition, order: usize, f: impl Fn(&[usize]) -> f64 + Sync) -> Result<Self> {
        let n = partition.num_cells();
        let len = tensor_len(n, order)?;
        let data = (0..len)
            .into_par_iter()
            .map(|flat| f(&unflatten(flat, n, order)))
            .collect();
        Ok(KernelFamily { partition, order, data })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw entries; callers must keep the tensor symmetric.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }

    pub fn entry(&self, index: &[usize]) -> f64 {
        self.data[flatten(index, self.partition.num_cells())]
    }

    /// Sums fine entries over descendant blocks.
    pub fn coarsen(&self, level: u32) -> Result<KernelFamily> {
        let coarse = crate::lattice::make_partition(self.partition.domain(), level as i64)?;
        let parents = self.partition.ancestor_indices(&coarse)?;
        let (n, m) = (self.partition.num_cells(), coarse.num_cells());
        let mut data = vec![0.0; tensor_len(m, self.order)?];
        for (flat, v) in self.data.iter().enumerate() {
            let mut rest = flat;
            let mut target = 0;
            let mut stride = 1;
            for _ in 0..self.order {
                target += parents[rest % n] * stride;
                rest /= n;
                stride *= m;
            }
            data[target] += v;
        }
        Ok(KernelFamily { partition: coarse, order: self.order, data })
    }

    /// Largest change under swapping adjacent indices, which generate all
    /// permutations.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.partition.num_cells();
        let mut worst = 0.0f64;
        for (flat, v) in self.data.iter().enumerate() {
            let idx = unflatten(flat, n, self.order);
            for a in 0..self.order.saturating_sub(1) {
                let mut sw = idx.clone();
                sw.swap(a, a + 1);
                worst = worst.max((v - self.entry(&sw)).abs());
            }
        }
        worst
    }

    /// `max |self - other| / max |other|`.
    pub fn relative_difference(&self, other: &KernelFamily) -> Result<f64> {
        if self.order != other.order || self.partition != other.partition {
            return invalid("kernels live on different partitions or orders");
        }
        let scale = other.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    /// `Σ α_{p_1…p_k} Π v_{p_i}`, contracting the last index first.
    pub fn contract(&self, v: &[C64]) -> C64 {
        let n = self.partition.num_cells();
        let mut cur: Vec<C64> = self.data.iter().map(|&a| C64::new(a, 0.0)).collect();
        for _ in 0..self.order {
            cur = cur.chunks(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        }
        cur[0]
    }

    pub fn contract_real(&self, v: &[f64]) -> f64 {
        let n = self.partition.num_cells();
        let mut cur = self.data.clone();
        for _ in 0..self.order {
            cur = cur.chunks(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        }
        cur[0]
    }

    /// S-transform of `∫ x^{⋄k} dα`: the contraction with `s_point(ξ_p)`.
    pub fn s_transform(&self, noise: Noise, xi: &[C64]) -> Result<C64> {
        let points = xi.iter().map(|&x| s_point(noise, x)).collect::<Result<Vec<_>>>()?;
        Ok(self.contract(&points))
    }
}

pub(crate) fn flatten(index: &[usize], n: usize) -> usize {
    index.iter().fold(0, |acc, &i| acc * n + i)
}

pub(crate) fn unflatten(mut flat: usize, n: usize, order: usize) -> Vec<usize> {
    let mut idx = vec![0; order];
    for slot in idx.iter_mut().rev() {
        *slot = flat % n;
        flat /= n;
    }
    idx
}

/// Reference noise plus optional quadratic and quartic kernels, all on the
/// same finest partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub noise: Noise,
    pub partition: Partition,
    pub alpha2: Option<KernelFamily>,
    pub alpha4: Option<KernelFamily>,
}

impl ModelSpec {
    pub fn new(noise: Noise, partition: Partition, alpha2: Option<KernelFamily>, alpha4: Option<KernelFamily>) -> Result<Self> {
        for (k, order) in [(&alpha2, 2), (&alpha4, 4)] {
            if let Some(k) = k {
                if k.order() != order || *k.partition() != partition {
                    return invalid(format!("order-{order} kernel does not match the model partition"));
                }
            }
        }
        Ok(ModelSpec { noise, partition, alpha2, alpha4 })
    }

    pub fn coarsen(&self, level: u32) -> Result<ModelSpec> {
        let partition = crate::lattice::make_partition(self.partition.domain(), level as i64)?;
        let c = |k: &Option<KernelFamily>| k.as_ref().map(|k| k.coarsen(level)).transpose();
        Ok(ModelSpec { noise: self.noise, alpha2: c(&self.alpha2)?, alpha4: c(&self.alpha4)?, partition })
    }

    pub fn sa(&self, xi: &[C64]) -> Result<C64> {
        if xi.len() != self.partition.num_cells() {
            return invalid(format!("{} ξ values for {} cells", xi.len(), self.partition.num_cells()));
        }
        let mut total = C64::zero();
        for k in [&self.alpha2, &self.alpha4].into_iter().flatten() {
            total += k.s_transform(self.noise, xi)?;
        }
        Ok(total)
    }

    pub fn log_phi(&self, xi: &[C64]) -> Result<C64> {
        Ok(WickAlgebra::for_partition(self.noise, &self.partition).log_mu_hat(xi)? + self.sa(xi)?)
    }
}

/// `φ_P(ξ) = μ̂_P(ξ) e^{Sa_P(ξ)}` at every level up to the model's own.
#[derive(Debug, Clone)]
pub struct CharFn {
    levels: Vec<ModelSpec>,
}

impl CharFn {
    pub fn finest_level(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn model(&self, level: u32) -> Result<&ModelSpec> {
        self.levels.get(level as usize).ok_or_else(|| Error::InvalidArgument(format!("level {level} above the model's")))
    }

    pub fn log_phi(&self, level: u32, xi: &[C64]) -> Result<C64> {
        self.model(level)?.log_phi(xi)
    }

    pub fn phi(&self, level: u32, xi: &[C64]) -> Result<C64> {
        Ok(self.log_phi(level, xi)?.exp())
    }
}

const PROBE_SCALES: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

fn probe_directions(n: usize) -> Vec<Vec<(usize, f64)>> {
    let mut dirs: Vec<Vec<(usize, f64)>> = (0..n).map(|p| vec![(p, 1.0)]).collect();
    for p in 0..n {
        for q in p + 1..n {
            dirs.push(vec![(p, 1.0), (q, 1.0)]);
            dirs.push(vec![(p, 1.0), (q, -1.0)]);
        }
    }
    dirs.push((0..n).map(|p| (p, 1.0)).collect());
    dirs.push((0..n).map(|p| (p, if p % 2 == 0 { 1.0 } else { -1.0 })).collect());
    dirs
}

/// Builds `φ = μ̂ e^{Sa}`. Fails if `Re Sa` grows without bound along a probe
/// ray. Only the Gauss reference can fail: for Poisson and Gamma `|s_point|
/// ≤ 1` on real `ξ`.
pub fn wick_exp(model: &ModelSpec) -> Result<CharFn> {
    if model.noise == Noise::Gauss {
        let n = model.partition.num_cells();
        for dir in probe_directions(n) {
            let values: Vec<f64> = PROBE_SCALES
                .iter()
                .map(|t| {
                    let mut xi = vec![C64::zero(); n];
                    for &(p, c) in &dir {
                        xi[p] = C64::new(t * c, 0.0);
                    }
                    model.sa(&xi).map(|s| s.re)
                })
                .collect::<Result<_>>()?;
            let growing = values.windows(2).all(|w| w[1] > w[0]);
            if growing && values[2] > 0.0 && values[3] > 10.0 * values[2] && values[3] > 1.0 {
                return Err(Error::Unbounded(format!(
                    "Re Sa reaches {:.3e} along probe direction {dir:?}",
                    values[3]
                )));
            }
        }
    }
    let levels = (0..=model.partition.level()).map(|l| model.coarsen(l)).collect::<Result<_>>()?;
    Ok(CharFn { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condexp::cond_exp_poly;
    use crate::lattice::{make_partition, Domain};
    use crate::scalar::{rat, rat_int};

    fn x(var: usize) -> MultiPoly<Rational> {
        MultiPoly::var(var)
    }

    #[test]
    fn wick_power_examples() {
        let v = rat(1, 4);
        for n in Noise::ALL {
            assert_eq!(wick_power(n, 0, &v).unwrap(), Poly1::one());
            assert_eq!(wick_power(n, 1, &v).unwrap(), Poly1::x());
        }
        assert_eq!(
            wick_power(Noise::Gauss, 2, &v).unwrap(),
            Poly1::new(vec![-rat_int(4), rat_int(0), rat_int(1)])
        );
        let g3 = wick_power(Noise::Gamma, 3, &v).unwrap();
        let expect = powi(&v, 3) / (v.clone() * (v.clone() + rat_int(1)) * (v.clone() + rat_int(2)));
        assert_eq!(g3, Poly1::monomial(expect, 3));
        assert!(wick_power(Noise::Gauss, 11, &v).is_err());
    }

    #[test]
    fn renormalized_power_examples() {
        let q = rat(1, 8);
        assert_eq!(
            renormalized_power(Noise::Poisson, 2, &q).unwrap(),
            Poly1::new(vec![rat_int(0), -rat_int(8), rat_int(1)])
        );
        assert_eq!(
            renormalized_power(Noise::Gauss, 2, &q).unwrap(),
            Poly1::new(vec![-rat_int(8), rat_int(0), rat_int(1)])
        );
        assert_eq!(renormalized_power(Noise::Gamma, 1, &q).unwrap(), Poly1::x());
        for k in 0..=MAX_POWER {
            assert_eq!(renormalized_power(Noise::Poisson, k, &q).unwrap(), falling_factorial(k, &q));
        }
    }

    #[test]
    fn renormalized_powers_are_martingales() {
        for n in Noise::ALL {
            let (q, p) = (rat(1, 6), rat(5, 4));
            for k in 0..=8 {
                let fine = renormalized_power(n, k, &q).unwrap();
                let coarse = cond_exp_poly(n, &fine, &q, &p).unwrap();
                assert_eq!(coarse, wick_power(n, k, &p).unwrap(), "{n} k={k}");
            }
        }
    }

    #[test]
    fn wick_product_examples() {
        let v = rat(1, 2);
        for n in Noise::ALL {
            let distinct = wick_product_eval(n, &[(0, v.clone()), (3, v.clone())], &Placement::Equal).unwrap();
            assert_eq!(distinct, x(0).mul(&x(3)));
        }
        let twice = |n| wick_product_eval(n, &[(1, v.clone()), (1, v.clone())], &Placement::Equal).unwrap();
        assert_eq!(twice(Noise::Gauss), MultiPoly::from_univariate(1, &wick_power(Noise::Gauss, 2, &v).unwrap()));
        let poisson = MultiPoly::from_univariate(1, &Poly1::new(vec![rat_int(0), -v.recip(), rat_int(1)]));
        assert_eq!(twice(Noise::Poisson), poisson);
    }

    #[test]
    fn repeated_cells_give_wick_powers() {
        let v = rat(3, 8);
        for n in Noise::ALL {
            for m in 1..=6 {
                let cells = vec![(2, v.clone()); m];
                let got = wick_product_eval(n, &cells, &Placement::Telescoping).unwrap();
                assert_eq!(got, MultiPoly::from_univariate(2, &wick_power(n, m, &v).unwrap()), "{n} m={m}");
            }
        }
    }

    #[test]
    fn placement_independence() {
        let v = rat(1, 4);
        for n in Noise::ALL {
            for m in 1..=4 {
                let mut cells = vec![(0, v.clone()); m];
                cells.push((1, v.clone()));
                let strategies = Placement::strategies(m);
                assert!(strategies.len() >= 10);
                assert_eq!(wick_product_independence_check(n, &cells, &strategies).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn product_is_symmetric() {
        let p = make_partition(&Domain::unit(1).unwrap(), 2).unwrap();
        for n in Noise::ALL {
            let a = wick_product_on_partition(n, &p, &[0, 1, 0, 3], &Placement::Equal).unwrap();
            let b = wick_product_on_partition(n, &p, &[3, 0, 1, 0], &Placement::Equal).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn basis_round_trip() {
        let alg = WickAlgebra::new(Noise::Gamma, vec![rat(1, 3), rat(2, 1)]).unwrap();
        let a = x(0).mul(&x(0)).mul(&x(1)).add(&MultiPoly::constant(rat(1, 2)));
        assert_eq!(alg.to_ordinary(&alg.to_wick(&a).unwrap()).unwrap(), a);
        for n in Noise::ALL {
            let alg = WickAlgebra::new(n, vec![rat(1, 3), rat(2, 1)]).unwrap();
            let w = x(0).mul(&x(0)).mul(&x(0)).add(&x(1).scale(&rat(3, 2)));
            assert_eq!(alg.to_wick(&alg.to_ordinary(&w).unwrap()).unwrap(), w);
        }
    }

    #[test]
    fn s_point_values() {
        assert_eq!(s_point(Noise::Gauss, C64::zero()).unwrap(), C64::zero());
        assert_eq!(s_point(Noise::Poisson, C64::zero()).unwrap(), C64::one());
        assert!(s_point(Noise::Gamma, C64::i()).is_err());
    }

    #[test]
    fn s_transform_routes_agree_and_multiply() {
        for n in Noise::ALL {
            let alg = WickAlgebra::new(n, vec![rat(1, 4)]).unwrap();
            for step in 0..100 {
                let xi = [C64::new(-3.0 + 0.06 * step as f64, 0.0)];
                for (a, b) in [(1usize, 2usize), (2, 3), (0, 4)] {
                    let wa = MultiPoly::from_univariate(0, &wick_power(n, a, &rat(1, 4)).unwrap());
                    let wb = MultiPoly::from_univariate(0, &wick_power(n, b, &rat(1, 4)).unwrap());
                    let wab = MultiPoly::from_univariate(0, &wick_power(n, a + b, &rat(1, 4)).unwrap());
                    let lhs = alg.s_transform(&wab, &xi).unwrap();
                    let rhs = alg.s_transform(&wa, &xi).unwrap() * alg.s_transform(&wb, &xi).unwrap();
                    assert!((lhs - rhs).norm() <= 1e-10, "{n}");
                    let direct = s_point(n, xi[0]).unwrap().powu((a + b) as u32);
                    assert!((lhs - direct).norm() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn s_transform_of_wick_mul() {
        for n in Noise::ALL {
            let alg = WickAlgebra::new(n, vec![rat(1, 2), rat(1, 3)]).unwrap();
            let a = x(0).mul(&x(1)).add(&x(0).mul(&x(0)).scale(&rat(2, 3)));
            let b = x(1).mul(&x(1)).sub(&MultiPoly::constant(rat_int(5)));
            let ab = alg.wick_mul(&a, &b).unwrap();
            let xi = [C64::new(0.7, 0.0), C64::new(-1.3, 0.0)];
            let lhs = alg.s_transform(&ab, &xi).unwrap();
            let rhs = alg.s_transform(&a, &xi).unwrap() * alg.s_transform(&b, &xi).unwrap();
            assert!((lhs - rhs).norm() <= 1e-10, "{n}");
            let via_wick = alg.s_transform_wick(&alg.to_wick(&ab).unwrap(), &xi).unwrap();
            assert!((lhs - via_wick).norm() <= 1e-10);
        }
    }

    #[test]
    fn t_transform_matches_s_transform() {
        let p = make_partition(&Domain::unit(1).unwrap(), 1).unwrap();
        for n in Noise::ALL {
            let alg = WickAlgebra::for_partition(n, &p);
            let sq = MultiPoly::from_univariate(0, &wick_power(n, 2, &rat(1, 2)).unwrap());
            let xi = [0.8, -0.4];
            let est = t_transform_mc(&sq, &p, n, &xi, 9, 40_000).unwrap();
            let xs: Vec<C64> = xi.iter().map(|&k| C64::new(k, 0.0)).collect();
            let s = alg.s_transform(&sq, &xs).unwrap();
            assert!((est.ratio.re - s.re).abs() <= 4.0 * est.ratio_se.0, "{n} {est:?} {s}");
            assert!((est.ratio.im - s.im).abs() <= 4.0 * est.ratio_se.1, "{n} {est:?} {s}");
        }
    }

    fn test_kernel(level: u32, order: usize) -> KernelFamily {
        let p = make_partition(&Domain::unit(1).unwrap(), level as i64).unwrap();
        KernelFamily::from_fn(p, order, |idx| {
            let s: usize = idx.iter().sum();
            let prod: usize = idx.iter().map(|i| i + 1).product();
            1.0 / (1.0 + s as f64) + 0.01 * prod as f64
        })
        .unwrap()
    }

    #[test]
    fn kernel_coarsening_composes() {
        for order in [2, 4] {
            let k = test_kernel(3, order);
            assert!(k.symmetry_defect() == 0.0);
            let two_step = k.coarsen(2).unwrap().coarsen(1).unwrap();
            assert!(two_step.relative_difference(&k.coarsen(1).unwrap()).unwrap() <= 1e-12);
            let total: f64 = k.data().iter().sum();
            assert!((k.coarsen(0).unwrap().data()[0] - total).abs() <= 1e-12 * total);
        }
    }

    #[test]
    fn model_scale_consistency() {
        let k2 = test_kernel(3, 2);
        let k4 = KernelFamily::from_fn(k2.partition().clone(), 4, |idx| -0.001 * (1 + idx.iter().sum::<usize>()) as f64).unwrap();
        for n in Noise::ALL {
            let model = ModelSpec::new(n, k2.partition().clone(), Some(k2.clone()), Some(k4.clone())).unwrap();
            let phi = wick_exp(&model).unwrap();
            for t in 0..20 {
                let coarse: Vec<C64> = (0..4).map(|p| C64::new(((t * 7 + p * 3) % 11) as f64 / 5.0 - 1.0, 0.0)).collect();
                let fine: Vec<C64> = (0..8).map(|q| coarse[q / 2]).collect();
                let a = phi.phi(2, &coarse).unwrap();
                let b = phi.phi(3, &fine).unwrap();
                assert!((a - b).norm() <= 1e-12 * a.norm().max(1e-300), "{n}");
            }
        }
    }

    #[test]
    fn empty_model_is_reference() {
        let p = make_partition(&Domain::unit(1).unwrap(), 2).unwrap();
        let phi = wick_exp(&ModelSpec::new(Noise::Gamma, p.clone(), None, None).unwrap()).unwrap();
        let xi = vec![C64::new(0.3, 0.0); 4];
        let direct = crate::noise::charfn(Noise::Gamma, 1.0, 0.3).unwrap();
        assert!((phi.phi(2, &xi).unwrap() - direct).norm() < 1e-14);
    }

    #[test]
    fn gauss_quadratic_closed_form() {
        let k2 = test_kernel(1, 2);
        let p = k2.partition().clone();
        let phi = wick_exp(&ModelSpec::new(Noise::Gauss, p, Some(k2.clone()), None).unwrap()).unwrap();
        let xi = [0.4, -1.1];
        let xs: Vec<C64> = xi.iter().map(|&v| C64::new(v, 0.0)).collect();
        let quad = k2.contract_real(&xi);
        let expect = (-0.5 * 0.5 * (xi[0] * xi[0] + xi[1] * xi[1]) - quad).exp();
        assert!((phi.phi(1, &xs).unwrap() - expect).norm() < 1e-14);
    }

    #[test]
    fn unbounded_sa_rejected() {
        let p = make_partition(&Domain::unit(1).unwrap(), 1).unwrap();
        let k2 = KernelFamily::new(p.clone(), 2, vec![-1.0, 0.0, 0.0, 0.5]).unwrap();
        let err = wick_exp(&ModelSpec::new(Noise::Gauss, p.clone(), Some(k2.clone()), None).unwrap());
        assert!(matches!(err, Err(Error::Unbounded(_))));
        assert!(wick_exp(&ModelSpec::new(Noise::Poisson, p, Some(k2), None).unwrap()).is_ok());
    }
}
