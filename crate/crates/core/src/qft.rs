//! Lattice field theory built on the Wick calculus: the periodic massive
//! Green function, free-field and quartic kernels, connected cumulants,
//! reflection positivity and complete monotonicity.
//!
//! Kernels are computed on a site grid `subgrid` times finer than the cell
//! partition, with spacing `h`. The smeared Green function of a cell is
//! `g_p = G·1_p`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex as FftComplex;
use rustfft::FftPlanner;
use serde_json::{json, Value};

use crate::algebra::{Monomial, MultiPoly};
use crate::error::{invalid, Error, Result};
use crate::lattice::{make_partition, Domain, Partition};
use crate::noise::{Noise, C64};
use crate::scalar::{format_rational, parse_rational, Real};
use crate::wick::{flatten, s_point, unflatten, KernelFamily, ModelSpec};

pub const MAX_SITES: usize = 1 << 20;

/// `(m² - Δ_h)^{-1}` on the periodic `n^d` site grid, stored as its
/// displacement row (circulant).
#[derive(Debug, Clone, PartialEq)]
pub struct GreenMatrix {
    dim: usize,
    n: usize,
    h: f64,
    mass: f64,
    row: Vec<f64>,
}

fn site_coords(mut index: usize, n: usize, dim: usize) -> Vec<usize> {
    let mut c = vec![0; dim];
    for slot in c.iter_mut().rev() {
        *slot = index % n;
        index /= n;
    }
    c
}

fn site_index(coords: &[usize], n: usize) -> usize {
    coords.iter().fold(0, |acc, &c| acc * n + c)
}

/// Runs an in-place FFT along every axis of a row-major `n^d` array.
fn fft_all_axes(data: &mut [FftComplex<f64>], n: usize, dim: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let total = data.len();
    let mut buf = vec![FftComplex::new(0.0, 0.0); n];
    for axis in 0..dim {
        let stride = n.pow((dim - 1 - axis) as u32);
        for start in 0..total {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (k, b) in buf.iter_mut().enumerate() {
                *b = data[start + k * stride];
            }
            fft.process(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                data[start + k * stride] = *b;
            }
        }
    }
}

/// Green function of `mass² - Δ_h` with the `(2d+1)`-point periodic
/// Laplacian on `n` sites per axis of a domain of side `L` (`h = L/n`).
pub fn discrete_green(domain: &Domain, n: usize, mass: f64) -> Result<GreenMatrix> {
    let dim = domain.dim();
    if n == 0 {
        return invalid("grid needs at least one site per axis");
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return invalid("mass must be positive");
    }
    let sites = n
        .checked_pow(dim as u32)
        .filter(|&s| s <= MAX_SITES)
        .ok_or_else(|| Error::InvalidArgument(format!("{n}^{dim} sites exceed {MAX_SITES}")))?;
    let h = domain.side_length().as_f64() / n as f64;
    let m2 = mass * mass;
    let mut spectrum: Vec<FftComplex<f64>> = (0..sites)
        .map(|i| {
            let lap: f64 = site_coords(i, n, dim)
                .iter()
                .map(|&k| {
                    let s = (std::f64::consts::PI * k as f64 / n as f64).sin();
                    4.0 * s * s / (h * h)
                })
                .sum();
            FftComplex::new(1.0 / (m2 + lap), 0.0)
        })
        .collect();
    fft_all_axes(&mut spectrum, n, dim, true);
    let row = spectrum.iter().map(|z| z.re / sites as f64).collect();
    Ok(GreenMatrix { dim, n, h, mass, row })
}

impl GreenMatrix {
    pub fn sites_per_axis(&self) -> usize {
        self.n
    }

    pub fn num_sites(&self) -> usize {
        self.row.len()
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// `G(a, b)` for row-major site indices.
    pub fn get(&self, a: usize, b: usize) -> f64 {
        let (ca, cb) = (site_coords(a, self.n, self.dim), site_coords(b, self.n, self.dim));
        let d: Vec<usize> = ca.iter().zip(&cb).map(|(x, y)| (x + self.n - y) % self.n).collect();
        self.row[site_index(&d, self.n)]
    }

    pub fn row_sum(&self) -> f64 {
        self.row.iter().sum()
    }

    pub fn min_entry(&self) -> f64 {
        self.row.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `‖(m² - Δ_h)G - I‖_∞`.
    pub fn residual(&self) -> f64 {
        let (n, dim, h2) = (self.n, self.dim, self.h * self.h);
        let mut worst = 0.0f64;
        for i in 0..self.row.len() {
            let c = site_coords(i, n, dim);
            let mut v = (self.mass * self.mass + 2.0 * dim as f64 / h2) * self.row[i];
            for axis in 0..dim {
                for step in [1, n - 1] {
                    let mut nb = c.clone();
                    nb[axis] = (nb[axis] + step) % n;
                    v -= self.row[site_index(&nb, n)] / h2;
                }
            }
            if i == 0 {
                v -= 1.0;
            }
            worst = worst.max(v.abs());
        }
        worst
    }

    /// Dense `n^d × n^d` matrix, for small grids.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let s = self.num_sites();
        DMatrix::from_fn(s, s, |a, b| self.get(a, b))
    }
}

/// The Green function on the site grid plus `g_p` for every cell.
#[derive(Debug, Clone)]
pub struct SmearedGreen {
    pub green: GreenMatrix,
    pub subgrid: usize,
    /// `rows[p][m] = Σ_{m' ∈ p} G(m, m')`.
    pub rows: Vec<Vec<f64>>,
}

impl SmearedGreen {
    pub fn site_volume(&self) -> f64 {
        self.green.h.powi(self.green.dim as i32)
    }
}

pub fn smeared_green(partition: &Partition, subgrid: usize) -> Result<SmearedGreen> {
    if subgrid == 0 {
        return invalid("subgrid factor must be positive");
    }
    let dim = partition.dim();
    let n = (partition.side_cells() as usize)
        .checked_mul(subgrid)
        .ok_or_else(|| Error::InvalidArgument("grid too large".into()))?;
    let green = discrete_green(partition.domain(), n, 1.0)?;
    let sites = green.num_sites();
    let offsets: Vec<Vec<usize>> = (0..subgrid.pow(dim as u32)).map(|i| site_coords(i, subgrid, dim)).collect();
    // g for the cell at the origin; other cells are translates
    let origin: Vec<f64> = (0..sites)
        .map(|m| {
            let c = site_coords(m, n, dim);
            offsets
                .iter()
                .map(|o| {
                    let d: Vec<usize> = c.iter().zip(o).map(|(x, y)| (x + n - y) % n).collect();
                    green.row[site_index(&d, n)]
                })
                .sum()
        })
        .collect();
    let rows = (0..partition.num_cells())
        .into_par_iter()
        .map(|p| {
            let shift: Vec<usize> = partition.cell(p).coords.iter().map(|&c| c as usize * subgrid).collect();
            (0..sites)
                .map(|m| {
                    let c = site_coords(m, n, dim);
                    let d: Vec<usize> = c.iter().zip(&shift).map(|(x, s)| (x + n - s) % n).collect();
                    origin[site_index(&d, n)]
                })
                .collect()
        })
        .collect();
    Ok(SmearedGreen { green, subgrid, rows })
}

/// `α_{pq} = ½ h^d Σ_{m ∈ p} g_q(m)`.
pub fn propagator_from(sm: &SmearedGreen, partition: &Partition) -> Result<KernelFamily> {
    let n = sm.green.n;
    let dim = partition.dim();
    let r = sm.subgrid;
    let hd = sm.site_volume();
    let members: Vec<Vec<usize>> = (0..partition.num_cells()).map(|_| Vec::new()).collect();
    let mut members = members;
    for m in 0..sm.green.num_sites() {
        let c = site_coords(m, n, dim);
        let cell: Vec<u64> = c.iter().map(|&x| (x / r) as u64).collect();
        let p = partition.index_of(&crate::lattice::Cell::new(partition.level(), cell)?)?;
        members[p].push(m);
    }
    KernelFamily::from_fn(partition.clone(), 2, |idx| {
        0.5 * hd * members[idx[0]].iter().map(|&m| sm.rows[idx[1]][m]).sum::<f64>()
    })
}

pub fn propagator_kernel(partition: &Partition, subgrid: usize) -> Result<KernelFamily> {
    propagator_from(&smeared_green(partition, subgrid)?, partition)
}

/// `α_{p_1…p_4} = -h^d Σ_m Π_i g_{p_i}(m)`, computed on sorted index tuples
/// and copied to their permutations.
pub fn quartic_from(sm: &SmearedGreen, partition: &Partition) -> Result<KernelFamily> {
    let cells = partition.num_cells();
    let hd = sm.site_volume();
    let rows = &sm.rows;
    let sorted: Vec<(usize, usize, usize, usize, f64)> = (0..cells)
        .into_par_iter()
        .flat_map_iter(|a| {
            let mut out = Vec::new();
            for b in a..cells {
                let ab: Vec<f64> = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).collect();
                for c in b..cells {
                    let abc: Vec<f64> = ab.iter().zip(&rows[c]).map(|(x, y)| x * y).collect();
                    for d in c..cells {
                        let v: f64 = abc.iter().zip(&rows[d]).map(|(x, y)| x * y).sum();
                        out.push((a, b, c, d, -hd * v));
                    }
                }
            }
            out
        })
        .collect();
    let mut kernel = KernelFamily::zeros(partition.clone(), 4)?;
    let data = kernel.data_mut();
    for (a, b, c, d, v) in sorted {
        for perm in permutations4([a, b, c, d]) {
            data[flatten(&perm, cells)] = v;
        }
    }
    Ok(kernel)
}

fn permutations4(t: [usize; 4]) -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            if b == a {
                continue;
            }
            for c in 0..4 {
                if c == a || c == b {
                    continue;
                }
                let d = 6 - a - b - c;
                out.push([t[a], t[b], t[c], t[d]]);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

pub fn quartic_kernel(partition: &Partition, subgrid: usize) -> Result<KernelFamily> {
    quartic_from(&smeared_green(partition, subgrid)?, partition)
}

/// A lattice model with its site-grid data.
#[derive(Debug, Clone)]
pub struct QftModel {
    pub model: ModelSpec,
    pub subgrid: usize,
    smeared: SmearedGreen,
}

impl QftModel {
    /// Free field (`α²` from the propagator), plus the quartic kernel if
    /// requested.
    pub fn build(noise: Noise, domain: &Domain, level: u32, subgrid: usize, quartic: bool) -> Result<QftModel> {
        let partition = make_partition(domain, level as i64)?;
        let smeared = smeared_green(&partition, subgrid)?;
        let alpha2 = propagator_from(&smeared, &partition)?;
        let alpha4 = if quartic { Some(quartic_from(&smeared, &partition)?) } else { None };
        let model = ModelSpec::new(noise, partition, Some(alpha2), alpha4)?;
        Ok(QftModel { model, subgrid, smeared })
    }

    /// Wraps kernels read from elsewhere; the site grid is rebuilt.
    pub fn from_parts(model: ModelSpec, subgrid: usize) -> Result<QftModel> {
        let smeared = smeared_green(&model.partition, subgrid)?;
        Ok(QftModel { model, subgrid, smeared })
    }

    pub fn smeared(&self) -> &SmearedGreen {
        &self.smeared
    }

    pub fn with_noise(&self, noise: Noise) -> QftModel {
        let mut m = self.clone();
        m.model.noise = noise;
        m
    }

    /// `{"noise","dim","level","subgrid","side_length","alpha2","alpha4"}`;
    /// `alpha2` is dense, `alpha4` lists `[i,j,k,l,value]` for `i≤j≤k≤l`.
    pub fn to_json(&self) -> Value {
        let p = &self.model.partition;
        let n = p.num_cells();
        let alpha2 = self.model.alpha2.as_ref().map(|k| {
            Value::Array((0..n).map(|i| Value::Array((0..n).map(|j| json!(k.entry(&[i, j]))).collect())).collect())
        });
        let alpha4 = self.model.alpha4.as_ref().map(|k| {
            let mut out = Vec::new();
            for (flat, &v) in k.data().iter().enumerate() {
                let idx = unflatten(flat, n, 4);
                if idx.windows(2).all(|w| w[0] <= w[1]) && v != 0.0 {
                    out.push(json!([idx[0], idx[1], idx[2], idx[3], v]));
                }
            }
            Value::Array(out)
        });
        json!({
            "noise": self.model.noise.name(),
            "dim": p.dim(),
            "level": p.level(),
            "subgrid": self.subgrid,
            "side_length": format_rational(p.domain().side_length()),
            "alpha2": alpha2.unwrap_or(Value::Null),
            "alpha4": alpha4.unwrap_or(Value::Null),
        })
    }

    pub fn from_json(v: &Value) -> Result<QftModel> {
        let field = |k: &str| v.get(k).ok_or_else(|| Error::InvalidArgument(format!("model file lacks {k:?}")));
        let uint = |k: &str| field(k)?.as_u64().ok_or_else(|| Error::InvalidArgument(format!("{k:?} must be a nonnegative integer")));
        let noise: Noise = field("noise")?.as_str().ok_or_else(|| Error::InvalidArgument("noise must be a string".into()))?.parse()?;
        let dim = uint("dim")? as usize;
        let level = uint("level")?;
        let subgrid = uint("subgrid")? as usize;
        let side = match v.get("side_length") {
            Some(Value::String(s)) => parse_rational(s)?,
            Some(Value::Number(n)) => parse_rational(&n.to_string())?,
            None | Some(Value::Null) => crate::scalar::rat_int(1),
            Some(_) => return invalid("side_length must be a string or number"),
        };
        let partition = make_partition(&Domain::new(dim, side)?, level as i64)?;
        let n = partition.num_cells();
        let alpha2 = match v.get("alpha2") {
            None | Some(Value::Null) => None,
            Some(Value::Array(rows)) => {
                if rows.len() != n {
                    return invalid(format!("alpha2 has {} rows for {n} cells", rows.len()));
                }
                let mut data = Vec::with_capacity(n * n);
                for row in rows {
                    let row = row.as_array().filter(|r| r.len() == n).ok_or_else(|| Error::InvalidArgument("alpha2 rows must have one entry per cell".into()))?;
                    for x in row {
                        data.push(x.as_f64().ok_or_else(|| Error::InvalidArgument("alpha2 entries must be numbers".into()))?);
                    }
                }
                Some(KernelFamily::new(partition.clone(), 2, data)?)
            }
            Some(_) => return invalid("alpha2 must be a matrix"),
        };
        let alpha4 = match v.get("alpha4") {
            None | Some(Value::Null) => None,
            Some(Value::Array(entries)) => {
                let mut k = KernelFamily::zeros(partition.clone(), 4)?;
                let data = k.data_mut();
                for e in entries {
                    let e = e.as_array().filter(|e| e.len() == 5).ok_or_else(|| Error::InvalidArgument("alpha4 entries are [i,j,k,l,value]".into()))?;
                    let mut idx = [0usize; 4];
                    for (slot, x) in idx.iter_mut().zip(e) {
                        *slot = x.as_u64().filter(|&i| (i as usize) < n).ok_or_else(|| Error::InvalidArgument("alpha4 index out of range".into()))? as usize;
                    }
                    let val = e[4].as_f64().ok_or_else(|| Error::InvalidArgument("alpha4 value must be a number".into()))?;
                    for perm in permutations4(idx) {
                        data[flatten(&perm, n)] = val;
                    }
                }
                Some(k)
            }
            Some(_) => return invalid("alpha4 must be a list"),
        };
        QftModel::from_parts(ModelSpec::new(noise, partition, alpha2, alpha4)?, subgrid)
    }
}

/// Result of [`quartic_s_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuarticReport {
    pub samples: usize,
    /// Largest quartic `Sa` seen; must be ≤ 0.
    pub max_value: f64,
    /// Largest `|contraction - direct| / max(1, |direct|)`.
    pub max_route_diff: f64,
    pub sa_at_zero: f64,
}

/// Evaluates the quartic part of `Sa` with the Gauss point `s = -iξ` two
/// ways: contracting `α⁴` with `(−iξ)^{⊗4}`, and directly as
/// `-h^d Σ_m (Σ_p ξ_p g_p(m))⁴`.
pub fn quartic_s_check(model: &QftModel, xis: &[Vec<f64>]) -> Result<QuarticReport> {
    let k4 = model.model.alpha4.as_ref().ok_or_else(|| Error::Precondition("model has no quartic kernel".into()))?;
    let sm = &model.smeared;
    let hd = sm.site_volume();
    let cells = model.model.partition.num_cells();
    let eval = |xi: &[f64]| -> Result<(f64, f64)> {
        if xi.len() != cells {
            return invalid(format!("{} ξ values for {cells} cells", xi.len()));
        }
        let xs: Vec<C64> = xi.iter().map(|&x| C64::new(x, 0.0)).collect();
        let contraction = k4.s_transform(Noise::Gauss, &xs)?;
        let sites = sm.green.num_sites();
        let direct = -hd
            * (0..sites)
                .map(|m| {
                    let s: f64 = (0..cells).map(|p| xi[p] * sm.rows[p][m]).sum();
                    s.powi(4)
                })
                .sum::<f64>();
        let diff = ((contraction - C64::new(direct, 0.0)).norm()) / direct.abs().max(1.0);
        Ok((direct.max(contraction.re), diff))
    };
    let (sa_at_zero, _) = eval(&vec![0.0; cells])?;
    let results: Vec<(f64, f64)> = xis.par_iter().map(|x| eval(x)).collect::<Result<_>>()?;
    let max_value = results.iter().map(|r| r.0).fold(sa_at_zero, f64::max);
    let max_route_diff = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(QuarticReport { samples: xis.len(), max_value, max_route_diff, sa_at_zero })
}

/// `count` dual fields with entries uniform in `[-2, 2]`.
pub fn random_xis(cells: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..cells).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

/// `Π_i (i/|p_i|)∂_{ξ_{p_i}} log φ` at `ξ = 0` for distinct cells. Crossed
/// derivatives of `log μ̂` vanish, so only `Sa` contributes; each kernel
/// tuple is differentiated exactly through `s(0)` and `s'(0) = -i`.
pub fn connected_cumulant(model: &ModelSpec, cells: &[usize]) -> Result<f64> {
    if !(2..=4).contains(&cells.len()) {
        return invalid("connected cumulants take 2 to 4 cells");
    }
    let n = model.partition.num_cells();
    for (i, c) in cells.iter().enumerate() {
        if *c >= n {
            return invalid(format!("cell {c} not in the partition"));
        }
        if cells[..i].contains(c) {
            return invalid(format!("cell {c} repeated; cumulants need distinct cells"));
        }
    }
    let s0 = s_point(model.noise, C64::zero())?;
    let ds0 = C64::new(0.0, -1.0);
    let mut total = C64::zero();
    for k in [&model.alpha2, &model.alpha4].into_iter().flatten() {
        let order = k.order();
        if order < cells.len() {
            continue;
        }
        let mut acc = C64::zero();
        for (flat, &a) in k.data().iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let idx = unflatten(flat, n, order);
            if !cells.iter().all(|c| idx.contains(c)) {
                continue;
            }
            let mut term = C64::new(a, 0.0);
            let mut seen: Vec<usize> = Vec::with_capacity(order);
            for &p in &idx {
                if seen.contains(&p) {
                    continue;
                }
                seen.push(p);
                let m = idx.iter().filter(|&&q| q == p).count() as i32;
                term *= if cells.contains(&p) { ds0 * s0.powi(m - 1) * m as f64 } else { s0.powi(m) };
            }
            acc += term;
        }
        total += acc;
    }
    let vol = model.partition.cell_volume().as_f64();
    let prefactor = C64::new(0.0, 1.0 / vol).powi(cells.len() as i32);
    let value = prefactor * total;
    if value.im.abs() > 1e-12 * value.re.abs().max(1.0) {
        return Err(Error::Domain(format!("cumulant has imaginary part {}", value.im)));
    }
    Ok(value.re)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpReport {
    pub basis_size: usize,
    pub min_eigenvalue: f64,
}

/// `c ↦ 2^ℓ - 1 - c` along `axis`.
pub fn reflect_cell(partition: &Partition, cell: usize, axis: usize) -> usize {
    let mut c = partition.cell(cell);
    c.coords[axis] = partition.side_cells() - 1 - c.coords[axis];
    partition.index_of(&c).expect("reflection stays in the partition")
}

fn isserlis(cov: &DMatrix<f64>, idx: &[usize]) -> f64 {
    match idx.split_first() {
        None => 1.0,
        Some((&a, rest)) => {
            if rest.len() % 2 == 0 {
                return 0.0;
            }
            (0..rest.len())
                .map(|j| {
                    let c = cov[(a, rest[j])];
                    if c == 0.0 {
                        return 0.0;
                    }
                    let mut others = rest.to_vec();
                    others.remove(j);
                    c * isserlis(cov, &others)
                })
                .sum()
        }
    }
}

fn multisets(items: &[usize], max_degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_degree {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().map(|&l: &usize| items.iter().position(|&x| x == l).unwrap()).unwrap_or(0);
            for &it in &items[start..] {
                let mut e: Vec<usize> = m.clone();
                e.push(it);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Minimum eigenvalue of `E[b · θb']` over monomials `b, b'` of degree ≤ D
/// in the positive-time cells, for a Gaussian model.
pub fn rp_gram(model: &ModelSpec, degree: usize, axis: usize) -> Result<RpReport> {
    let p = &model.partition;
    if model.noise != Noise::Gauss || model.alpha4.as_ref().is_some_and(|k| k.data().iter().any(|&v| v != 0.0)) {
        return Err(Error::Precondition("the Gram check needs a Gauss reference and a quadratic kernel".into()));
    }
    if axis >= p.dim() {
        return invalid(format!("time axis {axis} outside dimension {}", p.dim()));
    }
    if p.level() == 0 {
        return Err(Error::Precondition("reflection symmetry needs at least two cells along the time axis".into()));
    }
    if degree > 3 {
        return invalid("basis degree at most 3");
    }
    let n = p.num_cells();
    let vol = p.cell_volume().as_f64();
    let theta: Vec<usize> = (0..n).map(|c| reflect_cell(p, c, axis)).collect();
    let zero = KernelFamily::zeros(p.clone(), 2)?;
    let alpha = model.alpha2.as_ref().unwrap_or(&zero);
    let scale = alpha.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for a in 0..n {
        for b in 0..n {
            if (alpha.entry(&[a, b]) - alpha.entry(&[theta[a], theta[b]])).abs() > 1e-12 * scale.max(1e-300) {
                return Err(Error::Precondition(format!(
                    "kernel is not symmetric under reflection of axis {axis} (cells {a}, {b})"
                )));
            }
        }
    }
    let cov = DMatrix::from_fn(n, n, |a, b| {
        let d = if a == b { 1.0 / vol } else { 0.0 };
        d + 2.0 * alpha.entry(&[a, b]) / (vol * vol)
    });
    let half = p.side_cells() / 2;
    let positive: Vec<usize> = (0..n).filter(|&c| p.cell(c).coords[axis] >= half).collect();
    let basis = multisets(&positive, degree);
    let m = basis.len();
    let entries: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|flat| {
            let (i, j) = (flat / m, flat % m);
            let mut idx = basis[i].clone();
            idx.extend(basis[j].iter().map(|&c| theta[c]));
            isserlis(&cov, &idx)
        })
        .collect();
    let gram = DMatrix::from_row_slice(m, m, &entries);
    let sym = (&gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RpReport { basis_size: m, min_eigenvalue })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmReport {
    pub passed: bool,
    pub derivatives_checked: usize,
    pub points: usize,
    /// Smallest `(-1)^{|γ|} D^γ φ_Lb / φ_Lb` seen.
    pub min_signed_value: f64,
}

/// `(-1)^{|γ|} D^γ φ_Lb ≥ 0` for `|γ| ≤ max_order` on positive `ξ`, with
/// `φ_Lb = exp(Σ α_{kl} u_k u_l)` and `u = e^{-ξ}` (Poisson) or
/// `1/(1+ξ)` (Gamma).
pub fn cm_check(model: &ModelSpec, max_order: usize, points: &[Vec<f64>]) -> Result<CmReport> {
    if model.noise == Noise::Gauss {
        return Err(Error::Precondition("complete monotonicity needs a Poisson or Gamma reference".into()));
    }
    if model.alpha4.is_some() {
        return Err(Error::Precondition("complete monotonicity is checked for quadratic kernels only".into()));
    }
    if max_order > 3 {
        return invalid("orders above 3 are not supported");
    }
    let n = model.partition.num_cells();
    let zero = KernelFamily::zeros(model.partition.clone(), 2)?;
    let alpha = model.alpha2.as_ref().unwrap_or(&zero);
    if alpha.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Precondition("kernel must be entrywise nonnegative".into()));
    }
    if let Some(bad) = points.iter().find(|x| x.len() != n || x.iter().any(|&v| v < 0.0)) {
        return invalid(format!("probe point {bad:?} is not a nonnegative vector with {n} entries"));
    }
    let mut exponent = MultiPoly::zero();
    for a in 0..n {
        for b in 0..n {
            let v = alpha.entry(&[a, b]);
            if v != 0.0 {
                exponent.add_term(Monomial::from_pairs([(a, 1), (b, 1)]), v);
            }
        }
    }
    let gamma_ref = model.noise == Noise::Gamma;
    // d/dξ_k of a polynomial in u
    let d = |q: &MultiPoly<f64>, k: usize| -> MultiPoly<f64> {
        let du = if gamma_ref { MultiPoly::term(Monomial::var(k, 2), -1.0) } else { MultiPoly::term(Monomial::var(k, 1), -1.0) };
        q.partial(k).mul(&du)
    };
    let d_exponent: Vec<MultiPoly<f64>> = (0..n).map(|k| d(&exponent, k)).collect();
    // P_γ for sorted multi-indices γ, built by appending one index at a time
    let mut layer: Vec<(Vec<usize>, MultiPoly<f64>)> = vec![(Vec::new(), MultiPoly::constant(1.0))];
    let mut all = Vec::new();
    for _ in 0..max_order {
        let mut next = Vec::new();
        for (g, pg) in &layer {
            for k in g.last().copied().unwrap_or(0)..n {
                let q = d(pg, k).add(&pg.mul(&d_exponent[k]));
                let mut gk = g.clone();
                gk.push(k);
                next.push((gk, q));
            }
        }
        all.extend(next.iter().cloned());
        layer = next;
    }
    let u_of = |xi: &[f64]| -> Vec<f64> { xi.iter().map(|&x| if gamma_ref { 1.0 / (1.0 + x) } else { (-x).exp() }).collect() };
    let mut min_signed = f64::INFINITY;
    for xi in points {
        let u = u_of(xi);
        for (g, pg) in &all {
            let sign = if g.len() % 2 == 0 { 1.0 } else { -1.0 };
            min_signed = min_signed.min(sign * pg.eval(&u));
        }
    }
    if all.is_empty() || points.is_empty() {
        min_signed = 0.0;
    }
    Ok(CmReport { passed: min_signed >= 0.0, derivatives_checked: all.len(), points: points.len(), min_signed_value: min_signed })
}

/// Positive probe points: constant vectors plus seeded random ones in `[0, 3]`.
pub fn cm_probe_points(cells: usize, random: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = [0.0, 0.25, 1.0, 3.0].iter().map(|&t| vec![t; cells]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pts.extend((0..random).map(|_| (0..cells).map(|_| rng.random_range(0.0..3.0)).collect::<Vec<f64>>()));
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize) -> Domain {
        Domain::unit(d).unwrap()
    }

    #[test]
    fn green_single_site_and_pair() {
        let g = discrete_green(&unit(1), 1, 1.0).unwrap();
        assert!((g.get(0, 0) - 1.0).abs() < 1e-15);
        let g = discrete_green(&unit(1), 2, 1.0).unwrap();
        let h = 0.5f64;
        let a = 1.0 + 2.0 / (h * h);
        let b = -2.0 / (h * h);
        let det = a * a - b * b;
        assert!((g.get(0, 0) - a / det).abs() < 1e-14);
        assert!((g.get(0, 1) + b / det).abs() < 1e-14);
    }

    #[test]
    fn green_residual_row_sums_positivity() {
        for d in 1..=3 {
            for n in [1usize, 2, 4, 8, 16] {
                if n.pow(d as u32) > 4096 {
                    continue;
                }
                let g = discrete_green(&unit(d), n, 1.0).unwrap();
                assert!(g.residual() <= 1e-8, "d={d} n={n}");
                assert!((g.row_sum() - 1.0).abs() <= 1e-10);
                assert!(g.min_entry() > 0.0);
            }
        }
        let g = discrete_green(&unit(1), 64, 1.0).unwrap();
        assert!(g.min_entry() > 0.0);
    }

    #[test]
    fn green_matches_dense_inverse() {
        let g = discrete_green(&unit(2), 4, 1.0).unwrap();
        let h2 = g.spacing().powi(2);
        let s = g.num_sites();
        let op = DMatrix::from_fn(s, s, |a, b| {
            let (ca, cb) = (site_coords(a, 4, 2), site_coords(b, 4, 2));
            let diff: Vec<usize> = ca.iter().zip(&cb).map(|(x, y)| (x + 4 - y) % 4).collect();
            if a == b {
                1.0 + 4.0 / h2
            } else if diff.iter().filter(|&&d| d != 0).count() == 1 && diff.iter().any(|&d| d == 1 || d == 3) {
                -1.0 / h2
            } else {
                0.0
            }
        });
        let prod = op * g.to_dense();
        assert!((prod - DMatrix::identity(s, s)).amax() < 1e-10);
    }

    #[test]
    fn propagator_sums_to_half_volume() {
        let p = make_partition(&Domain::new(2, crate::scalar::rat(3, 2)).unwrap(), 2).unwrap();
        let k = propagator_kernel(&p, 2).unwrap();
        let total: f64 = k.data().iter().sum();
        assert!((total - 0.5 * 2.25).abs() < 1e-10);
        assert_eq!(k.symmetry_defect(), 0.0);
        let single = propagator_kernel(&make_partition(&unit(1), 0).unwrap(), 1).unwrap();
        assert!((single.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kernels_compatible_under_coarsening() {
        let fine = make_partition(&unit(1), 3).unwrap();
        for (order, build) in [(2usize, propagator_kernel as fn(&Partition, usize) -> Result<KernelFamily>), (4, quartic_kernel)] {
            let k = build(&fine, 4).unwrap();
            for steps in 1..=2u32 {
                let coarse = make_partition(&unit(1), 3 - steps as i64).unwrap();
                let direct = build(&coarse, 4 << steps).unwrap();
                let summed = k.coarsen(3 - steps).unwrap();
                assert!(summed.relative_difference(&direct).unwrap() <= 1e-12, "order {order}");
            }
        }
    }

    #[test]
    fn quartic_entries_nonpositive_and_symmetric() {
        let p = make_partition(&unit(2), 1).unwrap();
        let k = quartic_kernel(&p, 4).unwrap();
        assert!(k.data().iter().all(|&v| v < 0.0));
        assert_eq!(k.symmetry_defect(), 0.0);
    }

    #[test]
    fn quartic_sa_routes() {
        let m = QftModel::build(Noise::Gauss, &unit(1), 3, 4, true).unwrap();
        let xis = random_xis(8, 200, 1);
        let r = quartic_s_check(&m, &xis).unwrap();
        assert_eq!(r.sa_at_zero, 0.0);
        assert!(r.max_value <= 0.0);
        assert!(r.max_route_diff <= 1e-10, "{r:?}");
    }

    #[test]
    fn free_field_cumulant_and_reference_independence() {
        let m = QftModel::build(Noise::Gauss, &unit(1), 2, 4, false).unwrap();
        let alpha = m.model.alpha2.as_ref().unwrap();
        let vol = 0.25;
        let c = connected_cumulant(&m.model, &[0, 2]).unwrap();
        assert!((c - 2.0 * alpha.entry(&[0, 2]) / (vol * vol)).abs() < 1e-12);
        for n in [Noise::Poisson, Noise::Gamma] {
            let other = connected_cumulant(&m.with_noise(n).model, &[0, 2]).unwrap();
            assert!((other - c).abs() <= 1e-10);
        }
        assert_eq!(connected_cumulant(&m.model, &[2, 0]).unwrap(), c);
        assert!(connected_cumulant(&m.model, &[1, 1]).is_err());
    }

    #[test]
    fn quartic_cumulant_is_symmetrized_kernel() {
        let p = make_partition(&unit(2), 1).unwrap();
        let k4 = quartic_kernel(&p, 2).unwrap();
        let model = ModelSpec::new(Noise::Gauss, p, None, Some(k4.clone())).unwrap();
        let c = connected_cumulant(&model, &[0, 1, 2, 3]).unwrap();
        let expect = 24.0 * k4.entry(&[0, 1, 2, 3]) / 0.25f64.powi(4);
        assert!((c - expect).abs() <= 1e-10 * expect.abs());
    }

    #[test]
    fn reflection_positivity_gram() {
        for (d, level) in [(1usize, 2u32), (1, 3), (2, 1), (2, 2)] {
            let m = QftModel::build(Noise::Gauss, &unit(d), level, 4, false).unwrap();
            for degree in 1..=2 {
                let r = rp_gram(&m.model, degree, 0).unwrap();
                assert!(r.min_eigenvalue >= -1e-10, "d={d} l={level} D={degree} {r:?}");
            }
        }
        let reference = ModelSpec::new(Noise::Gauss, make_partition(&unit(1), 2).unwrap(), None, None).unwrap();
        assert!(rp_gram(&reference, 2, 0).unwrap().min_eigenvalue >= -1e-10);
        let m = QftModel::build(Noise::Gauss, &unit(1), 0, 4, false).unwrap();
        assert!(matches!(rp_gram(&m.model, 1, 0), Err(Error::Precondition(_))));
        assert!(rp_gram(&reference, 1, 1).is_err());
    }

    #[test]
    fn asymmetric_kernel_rejected() {
        let p = make_partition(&unit(1), 1).unwrap();
        let k = KernelFamily::new(p.clone(), 2, vec![1.0, 0.1, 0.1, 2.0]).unwrap();
        let m = ModelSpec::new(Noise::Gauss, p, Some(k), None).unwrap();
        assert!(matches!(rp_gram(&m, 1, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn complete_monotonicity() {
        for n in [Noise::Poisson, Noise::Gamma] {
            let m = QftModel::build(n, &unit(1), 2, 4, false).unwrap();
            let pts = cm_probe_points(4, 8, 3);
            let r = cm_check(&m.model, 3, &pts).unwrap();
            assert!(r.passed, "{n} {r:?}");
            assert_eq!(r.derivatives_checked, 4 + 10 + 20);
            let empty = ModelSpec::new(n, m.model.partition.clone(), None, None).unwrap();
            let r0 = cm_check(&empty, 3, &pts).unwrap();
            assert!(r0.passed && r0.min_signed_value == 0.0);
        }
    }

    #[test]
    fn cm_first_order_closed_form() {
        let m = QftModel::build(Noise::Poisson, &unit(1), 1, 2, false).unwrap();
        let a = m.model.alpha2.as_ref().unwrap();
        let xi = vec![0.3, 1.2];
        let r = cm_check(&m.model, 1, &[xi.clone()]).unwrap();
        let first: Vec<f64> = (0..2)
            .map(|q| 2.0 * (0..2).map(|l| a.entry(&[q, l]) * (-xi[q] - xi[l]).exp()).sum::<f64>())
            .collect();
        assert!((r.min_signed_value - first[0].min(first[1])).abs() < 1e-14);
    }

    #[test]
    fn model_json_round_trip() {
        let m = QftModel::build(Noise::Poisson, &unit(1), 2, 2, true).unwrap();
        let back = QftModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.model, m.model);
        assert_eq!(back.subgrid, 2);
    }
}
