//! Periodic box `[0, L)^d`, its dyadic partitions and the coarse-graining
//! projection between them.
//!
//! Cells are half-open boxes (lower faces inclusive). All geometry is exact
//! rational; field values are generic over [`Real`].

use num_bigint::BigInt;
use num_traits::{One, Zero};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::scalar::{format_rational, parse_rational, Rational, Real};

/// Cap on `2^(level·dim)`.
pub const MAX_CELLS: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Domain {
    dim: usize,
    side_length: Rational,
}

impl Domain {
    pub fn new(dim: usize, side_length: Rational) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        if side_length <= Rational::zero() {
            return invalid("side length must be positive");
        }
        Ok(Domain { dim, side_length })
    }

    /// Unit box `[0,1)^d`.
    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(dim, Rational::one())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side_length(&self) -> &Rational {
        &self.side_length
    }

    pub fn volume(&self) -> Rational {
        num_traits::pow(self.side_length.clone(), self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub level: u32,
    pub coords: Vec<u64>,
}

impl Cell {
    pub fn new(level: u32, coords: Vec<u64>) -> Result<Self> {
        let n = 1u64 << level;
        if coords.iter().any(|&c| c >= n) {
            return invalid(format!("cell coordinates {coords:?} out of range at level {level}"));
        }
        Ok(Cell { level, coords })
    }

    pub fn volume(&self, domain: &Domain) -> Rational {
        cell_volume(domain, self.level)
    }

    /// Ancestor at a coarser (or equal) level.
    pub fn ancestor(&self, level: u32) -> Result<Cell> {
        if level > self.level {
            return invalid(format!("ancestor level {level} is finer than cell level {}", self.level));
        }
        let shift = self.level - level;
        Ok(Cell { level, coords: self.coords.iter().map(|c| c >> shift).collect() })
    }

    pub fn is_ancestor_of(&self, other: &Cell) -> bool {
        other.level >= self.level && other.ancestor(self.level).as_ref() == Ok(self)
    }

    /// Lower corner and side of the cell as exact rationals.
    pub fn bounds(&self, domain: &Domain) -> (Vec<Rational>, Rational) {
        let side = domain.side_length.clone() / Rational::from_integer(BigInt::one() << self.level);
        let lower = self
            .coords
            .iter()
            .map(|&c| side.clone() * Rational::from_integer(c.into()))
            .collect();
        (lower, side)
    }
}

pub fn cell_volume(domain: &Domain, level: u32) -> Rational {
    let side = domain.side_length.clone() / Rational::from_integer(BigInt::one() << level);
    num_traits::pow(side, domain.dim)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    domain: Domain,
    level: u32,
}

pub fn make_partition(domain: &Domain, level: i64) -> Result<Partition> {
    if level < 0 {
        return invalid(format!("partition level must be nonnegative, got {level}"));
    }
    let level = level as u32;
    let bits = level as u64 * domain.dim as u64;
    if bits > MAX_CELLS.trailing_zeros() as u64 {
        return invalid(format!(
            "partition with 2^{bits} cells exceeds the budget of {MAX_CELLS} cells"
        ));
    }
    Ok(Partition { domain: domain.clone(), level })
}

impl Partition {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    /// Cells per axis.
    pub fn side_cells(&self) -> u64 {
        1 << self.level
    }

    pub fn num_cells(&self) -> usize {
        1usize << (self.level as usize * self.domain.dim)
    }

    pub fn cell_volume(&self) -> Rational {
        cell_volume(&self.domain, self.level)
    }

    /// Row-major: the last coordinate varies fastest.
    pub fn cell(&self, index: usize) -> Cell {
        let n = self.side_cells() as usize;
        let mut coords = vec![0u64; self.domain.dim];
        let mut rest = index;
        for a in (0..self.domain.dim).rev() {
            coords[a] = (rest % n) as u64;
            rest /= n;
        }
        Cell { level: self.level, coords }
    }

    pub fn index_of(&self, cell: &Cell) -> Result<usize> {
        if cell.level != self.level || cell.coords.len() != self.domain.dim {
            return invalid(format!("cell {cell:?} does not belong to a level-{} partition", self.level));
        }
        let n = self.side_cells();
        let mut idx = 0usize;
        for &c in &cell.coords {
            if c >= n {
                return invalid(format!("cell {cell:?} out of range"));
            }
            idx = idx * n as usize + c as usize;
        }
        Ok(idx)
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.num_cells()).map(|i| self.cell(i))
    }

    /// Whether `coarse` is a coarsening of `self` over the same domain.
    pub fn refines(&self, coarse: &Partition) -> bool {
        self.domain == coarse.domain && self.level >= coarse.level
    }

    /// For each cell of `self`, the index of its ancestor in `coarse`.
    pub fn ancestor_indices(&self, coarse: &Partition) -> Result<Vec<usize>> {
        if !self.refines(coarse) {
            return invalid("target partition is not a coarsening of the source");
        }
        (0..self.num_cells())
            .map(|i| coarse.index_of(&self.cell(i).ancestor(coarse.level)?))
            .collect()
    }
}

/// Dyadic descendants of `p` at `level`, in row-major order.
pub fn children(p: &Cell, level: u32) -> Result<Vec<Cell>> {
    if level < p.level {
        return invalid(format!("refinement level {level} is coarser than cell level {}", p.level));
    }
    let shift = level - p.level;
    let per_axis = 1u64 << shift;
    let d = p.coords.len();
    let count = (per_axis as usize).pow(d as u32);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rest = i as u64;
        let mut coords = vec![0u64; d];
        for a in (0..d).rev() {
            coords[a] = (p.coords[a] << shift) + rest % per_axis;
            rest /= per_axis;
        }
        out.push(Cell { level, coords });
    }
    Ok(out)
}

/// The unique cell of `partition` whose half-open box contains `point`.
pub fn cell_of<T: Real>(point: &[T], partition: &Partition) -> Result<Cell> {
    let domain = partition.domain();
    if point.len() != domain.dim {
        return invalid(format!("point has {} coordinates, domain has {}", point.len(), domain.dim));
    }
    let side = T::from_rational(domain.side_length());
    let n = partition.side_cells();
    let scale = T::from_i64(n as i64) / side.clone();
    let mut coords = Vec::with_capacity(point.len());
    for x in point {
        if *x < T::zero() || *x >= side {
            return Err(Error::InvalidArgument(format!("point coordinate {x:?} outside [0, L)")));
        }
        let c = (x.clone() * scale.clone()).floor_i64();
        coords.push(c.clamp(0, n as i64 - 1) as u64);
    }
    Ok(Cell { level: partition.level, coords })
}

/// `(1/|p|) Σ |q| x_q` for an arbitrary family of children of `p`.
pub fn weighted_mean<T: Real>(children: &[(Rational, T)]) -> T {
    let total: Rational = children.iter().map(|(v, _)| v.clone()).sum();
    let acc = children
        .iter()
        .fold(T::zero(), |acc, (v, x)| acc + T::from_rational(v) * x.clone());
    acc / T::from_rational(&total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig<T> {
    pub partition: Partition,
    pub values: Vec<T>,
}

impl<T: Real> FieldConfig<T> {
    pub fn new(partition: Partition, values: Vec<T>) -> Result<Self> {
        if values.len() != partition.num_cells() {
            return invalid(format!(
                "expected {} values, got {}",
                partition.num_cells(),
                values.len()
            ));
        }
        Ok(FieldConfig { partition, values })
    }

    pub fn constant(partition: Partition, c: T) -> Self {
        let values = vec![c; partition.num_cells()];
        FieldConfig { partition, values }
    }

    pub fn value(&self, cell: &Cell) -> Result<&T> {
        Ok(&self.values[self.partition.index_of(cell)?])
    }
}

/// Coarse-graining `π_PQ`: each coarse value is the mean of its children
/// (all children of a dyadic cell carry equal volume).
pub fn coarsen_field<T: Real>(x: &FieldConfig<T>, target_level: u32) -> Result<FieldConfig<T>> {
    if target_level > x.partition.level {
        return invalid(format!(
            "target level {target_level} is finer than source level {}",
            x.partition.level
        ));
    }
    let coarse = make_partition(x.partition.domain(), target_level as i64)?;
    let parents = x.partition.ancestor_indices(&coarse)?;
    let mut sums = vec![T::zero(); coarse.num_cells()];
    for (v, &p) in x.values.iter().zip(&parents) {
        sums[p] = sums[p].clone() + v.clone();
    }
    let per = T::from_i64((x.partition.num_cells() / coarse.num_cells()) as i64);
    let values = sums.into_iter().map(|s| s / per.clone()).collect();
    Ok(FieldConfig { partition: coarse, values })
}

/// Coarsens a field onto another partition of the same domain.
pub fn project_onto<T: Real>(x: &FieldConfig<T>, target: &Partition) -> Result<FieldConfig<T>> {
    if x.partition.domain() != target.domain() {
        return invalid("field and target partition live on different domains");
    }
    coarsen_field(x, target.level())
}

/// JSON scalar encoding used by field files.
pub trait JsonScalar: Sized {
    fn to_json(&self) -> Value;
    fn from_json(v: &Value) -> Result<Self>;
}

impl JsonScalar for f64 {
    fn to_json(&self) -> Value {
        json!(self)
    }
    fn from_json(v: &Value) -> Result<Self> {
        v.as_f64()
            .ok_or_else(|| Error::InvalidArgument(format!("expected a number, got {v}")))
    }
}

impl JsonScalar for Rational {
    fn to_json(&self) -> Value {
        Value::String(format_rational(self))
    }
    fn from_json(v: &Value) -> Result<Self> {
        match v {
            Value::String(s) => parse_rational(s),
            Value::Number(n) if n.is_i64() => Ok(Rational::from_integer(n.as_i64().unwrap().into())),
            _ => invalid(format!("expected a \"num/den\" string, got {v}")),
        }
    }
}

impl<T: Real + JsonScalar> FieldConfig<T> {
    pub fn to_json(&self) -> Value {
        json!({
            "dim": self.partition.dim(),
            "side_length": format_rational(self.partition.domain().side_length()),
            "level": self.partition.level(),
            "values": self.values.iter().map(JsonScalar::to_json).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let field = |k: &str| v.get(k).ok_or_else(|| Error::InvalidArgument(format!("missing field {k:?}")));
        let dim = field("dim")?
            .as_u64()
            .ok_or_else(|| Error::InvalidArgument("dim must be a positive integer".into()))?;
        let side = Rational::from_json(field("side_length")?)?;
        let level = field("level")?
            .as_i64()
            .ok_or_else(|| Error::InvalidArgument("level must be an integer".into()))?;
        let domain = Domain::new(dim as usize, side)?;
        let partition = make_partition(&domain, level)?;
        let values = field("values")?
            .as_array()
            .ok_or_else(|| Error::InvalidArgument("values must be an array".into()))?
            .iter()
            .map(T::from_json)
            .collect::<Result<Vec<T>>>()?;
        FieldConfig::new(partition, values)
    }
}
