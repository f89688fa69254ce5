//! Piecewise-constant tensor fields on a box.
//!
//! Every density handled by the transport schemes is, after
//! discretization, a finite sum of such fields, which keeps masses, splits
//! and pushforwards exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::transport1d::{MonotoneMap1D, PiecewiseConstantDensity1D};

/// Anything that can report the mass of a box and bisect it by mass.
pub trait MassOracle {
    fn mass_in(&self, q: &Aabb) -> f64;

    /// Coordinate `s` on `axis` such that the part of `q` below `s` carries
    /// mass `target`. The default is plain bisection to `1e-13 * side`.
    fn split_at_mass(&self, q: &Aabb, axis: usize, target: f64) -> Result<f64> {
        bisect_mass(self, q, axis, target)
    }

    /// Split of `q` on `axis` leaving the fraction `frac` of its mass below.
    fn split_at_fraction(&self, q: &Aabb, axis: usize, frac: f64) -> Result<f64> {
        self.split_at_mass(q, axis, frac * self.mass_in(q))
    }
}

/// Bisection on the split coordinate to `1e-13 * side`.
pub fn bisect_mass<M: MassOracle + ?Sized>(oracle: &M, q: &Aabb, axis: usize, target: f64) -> Result<f64> {
    let total = oracle.mass_in(q);
    if !(target >= 0.0 && target <= total * (1.0 + 1e-12)) {
        return Err(Error::RootFinder(format!(
            "target mass {target} outside [0, {total}] on axis {axis}"
        )));
    }
    let (mut a, mut b) = (q.lo[axis], q.hi[axis]);
    let tol = 1e-13 * q.side(axis);
    while b - a > tol {
        let m = 0.5 * (a + b);
        if oracle.mass_in(&q.with_axis(axis, q.lo[axis], m)) < target {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Piecewise-constant field on a tensor grid over `bx`.
///
/// `values` is row-major with the last axis varying fastest. Zero values are
/// allowed; negative ones are not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellField {
    bx: Aabb,
    breaks: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl CellField {
    pub fn new(bx: Aabb, breaks: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        let d = bx.dim();
        if breaks.len() != d {
            return Err(Error::Dimension { expected: d, got: breaks.len() });
        }
        let mut cells = 1usize;
        for (i, b) in breaks.iter().enumerate() {
            if b.len() < 2 || b[0] != bx.lo[i] || *b.last().unwrap() != bx.hi[i] {
                return Err(Error::InvalidDensity(format!("breaks on axis {i} must span the box")));
            }
            if b.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidDensity(format!("breaks on axis {i} not increasing")));
            }
            cells *= b.len() - 1;
        }
        if values.len() != cells {
            return Err(Error::InvalidDensity(format!(
                "expected {cells} cell values, got {}",
                values.len()
            )));
        }
        if let Some(&v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeDensity(v));
        }
        Ok(Self { bx, breaks, values })
    }

    pub fn constant(bx: Aabb, value: f64) -> Self {
        let breaks = (0..bx.dim()).map(|i| vec![bx.lo[i], bx.hi[i]]).collect();
        Self { bx, breaks, values: vec![value] }
    }

    /// Uniform `cells[i]`-per-axis grid with the given values.
    pub fn uniform_grid(bx: Aabb, cells: &[usize], values: Vec<f64>) -> Result<Self> {
        let breaks = cells
            .iter()
            .enumerate()
            .map(|(i, &c)| grid_breaks(bx.lo[i], bx.hi[i], c))
            .collect();
        Self::new(bx, breaks, values)
    }

    pub fn dim(&self) -> usize {
        self.bx.dim()
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bx
    }

    pub fn breaks(&self) -> &[Vec<f64>] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> Vec<usize> {
        self.breaks.iter().map(|b| b.len() - 1).collect()
    }

    fn strides(&self) -> Vec<usize> {
        let shape = self.shape();
        let mut s = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    }

    fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let strides = self.strides();
        strides
            .iter()
            .map(|&s| {
                let i = flat / s;
                flat %= s;
                i
            })
            .collect()
    }

    pub fn cell_box(&self, flat: usize) -> Aabb {
        let idx = self.unflatten(flat);
        Aabb::closed(
            idx.iter().enumerate().map(|(a, &i)| self.breaks[a][i]).collect(),
            idx.iter().enumerate().map(|(a, &i)| self.breaks[a][i + 1]).collect(),
        )
    }

    pub fn cells(&self) -> impl Iterator<Item = (Aabb, f64)> + '_ {
        (0..self.values.len()).map(move |f| (self.cell_box(f), self.values[f]))
    }

    pub fn mass(&self) -> f64 {
        let mut total = 0.0;
        self.for_each_overlap(&self.bx, |flat, vol| total += self.values[flat] * vol);
        total
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    /// Value at `x`; points on cell faces take the lower-index cell's
    /// upper neighbour, except at the top face of the box.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let strides = self.strides();
        let mut flat = 0;
        for a in 0..self.dim() {
            let b = &self.breaks[a];
            let i = b.partition_point(|&t| t <= x[a]).saturating_sub(1).min(b.len() - 2);
            flat += i * strides[a];
        }
        self.values[flat]
    }

    /// Calls `f(flat_index, overlap_volume)` for every cell meeting `q` in
    /// a set of positive volume.
    pub fn for_each_overlap(&self, q: &Aabb, mut f: impl FnMut(usize, f64)) {
        let d = self.dim();
        let mut ranges: Vec<Vec<(usize, f64)>> = Vec::with_capacity(d);
        for a in 0..d {
            let b = &self.breaks[a];
            let (lo, hi) = (q.lo[a].max(b[0]), q.hi[a].min(b[b.len() - 1]));
            if !(hi > lo) {
                return;
            }
            let start = b.partition_point(|&t| t <= lo).saturating_sub(1);
            let mut r = Vec::new();
            for i in start..b.len() - 1 {
                if b[i] >= hi {
                    break;
                }
                let len = hi.min(b[i + 1]) - lo.max(b[i]);
                if len > 0.0 {
                    r.push((i, len));
                }
            }
            if r.is_empty() {
                return;
            }
            ranges.push(r);
        }
        let strides = self.strides();
        let mut pos = vec![0usize; d];
        loop {
            let mut flat = 0;
            let mut vol = 1.0;
            for a in 0..d {
                let (i, len) = ranges[a][pos[a]];
                flat += i * strides[a];
                vol *= len;
            }
            f(flat, vol);
            let mut a = d;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                pos[a] += 1;
                if pos[a] < ranges[a].len() {
                    break;
                }
                pos[a] = 0;
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            bx: self.bx.clone(),
            breaks: self.breaks.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// The field restricted to `q ∩ bx`, which must have positive volume.
    pub fn restrict(&self, q: &Aabb) -> Result<Self> {
        let inter = self
            .bx
            .intersection(q)
            .filter(|b| !b.is_degenerate())
            .ok_or_else(|| Error::InvalidBox("restriction to an empty box".into()))?;
        let breaks: Vec<Vec<f64>> = (0..self.dim())
            .map(|a| clip_breaks(&self.breaks[a], inter.lo[a], inter.hi[a]))
            .collect();
        let sub = Self { bx: inter, breaks, values: Vec::new() };
        let values = (0..sub.cell_count()).map(|f| self.eval(&sub.cell_box(f).center())).collect();
        Ok(Self { values, ..sub })
    }

    pub fn cell_count(&self) -> usize {
        self.breaks.iter().map(|b| b.len() - 1).product()
    }

    /// Resamples onto a grid whose breaks refine the current ones.
    pub fn refined(&self, breaks: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = Self { bx: self.bx.clone(), breaks, values: Vec::new() };
        out.values = (0..out.cell_count()).map(|f| self.eval(&out.cell_box(f).center())).collect();
        Self::new(out.bx, out.breaks, out.values)
    }

    /// Pointwise combination on the common refinement of two fields on the
    /// same box.
    pub fn combine(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.bx != other.bx {
            return Err(Error::InvalidBox("fields live on different boxes".into()));
        }
        let breaks: Vec<Vec<f64>> = (0..self.dim())
            .map(|a| merge_breaks(&self.breaks[a], &other.breaks[a]))
            .collect();
        let mut out = Self { bx: self.bx.clone(), breaks, values: Vec::new() };
        out.values = (0..out.cell_count())
            .map(|k| {
                let c = out.cell_box(k).center();
                f(self.eval(&c), other.eval(&c))
            })
            .collect();
        Ok(out)
    }

    pub fn sup_abs_diff(&self, other: &Self) -> Result<f64> {
        let diff = self.combine(other, |a, b| (a - b).abs())?;
        Ok(diff.max_value())
    }

    /// Masses of the slabs between consecutive breaks on `axis`, restricted
    /// to `q`, together with the clipped break positions.
    pub fn slab_masses(&self, q: &Aabb, axis: usize) -> (Vec<f64>, Vec<f64>) {
        let q = match self.bx.intersection(q) {
            Some(q) if q.side(axis) > 0.0 => q,
            _ => return (vec![0.0], vec![q.lo[axis], q.hi[axis].max(q.lo[axis])]),
        };
        let b = clip_breaks(&self.breaks[axis], q.lo[axis], q.hi[axis]);
        let mut masses = vec![0.0; b.len() - 1];
        let strides = self.strides();
        let offset = self.breaks[axis].partition_point(|&t| t <= q.lo[axis]).saturating_sub(1);
        self.for_each_overlap(&q, |flat, vol| {
            let i = (flat / strides[axis]) % (self.breaks[axis].len() - 1);
            let j = i - offset;
            masses[j] += self.values[flat] * vol;
        });
        (masses, b)
    }

    /// Marginal density along `axis` over the whole box.
    pub fn marginal(&self, axis: usize) -> Result<PiecewiseConstantDensity1D> {
        let (masses, b) = self.slab_masses(&self.bx, axis);
        let values = masses.iter().zip(b.windows(2)).map(|(m, w)| m / (w[1] - w[0])).collect();
        PiecewiseConstantDensity1D::new(b, values)
    }

    /// Pushforward under a strictly increasing map acting on `axis`.
    pub fn pushforward_axis(&self, axis: usize, map: &MonotoneMap1D) -> Result<Self> {
        let inv = map
            .inverse()
            .ok_or_else(|| Error::Unsupported("pushforward by a non-injective map".into()))?;
        let mut pts: Vec<f64> = self.breaks[axis].iter().map(|&t| map.eval(t)).collect();
        for p in map.pieces() {
            pts.push(p.eval(p.x0));
            pts.push(p.eval(p.x1));
        }
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        let mut bx = self.bx.clone();
        bx.lo[axis] = pts[0];
        bx.hi[axis] = *pts.last().unwrap();
        let mut breaks = self.breaks.clone();
        breaks[axis] = pts;
        let mut out = Self { bx, breaks, values: Vec::new() };
        out.values = (0..out.cell_count())
            .map(|k| {
                let mut c = out.cell_box(k).center();
                let y = c[axis];
                let x = inv.eval(y);
                let slope = map.pieces()[piece_of(map, x)].slope;
                c[axis] = x;
                self.eval(&c) / slope
            })
            .collect();
        Self::new(out.bx, out.breaks, out.values)
    }
}

impl MassOracle for CellField {
    fn mass_in(&self, q: &Aabb) -> f64 {
        let mut total = 0.0;
        self.for_each_overlap(q, |flat, vol| total += self.values[flat] * vol);
        total
    }

    /// Exact inversion of the piecewise-linear slab CDF.
    fn split_at_mass(&self, q: &Aabb, axis: usize, target: f64) -> Result<f64> {
        let (masses, b) = self.slab_masses(q, axis);
        invert_slabs(&masses, &b, axis, target, q.hi[axis])
    }

    /// When the slab CDF is linear the split is `lo + frac * side`, so
    /// halving a box of constant density returns its exact midpoint.
    fn split_at_fraction(&self, q: &Aabb, axis: usize, frac: f64) -> Result<f64> {
        let (masses, b) = self.slab_masses(q, axis);
        let rates: Vec<f64> = masses.iter().zip(b.windows(2)).map(|(m, w)| m / (w[1] - w[0])).collect();
        let (lo, hi) = rates.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
        if lo > 0.0 && hi - lo <= 1e-12 * hi && (0.0..=1.0).contains(&frac) {
            let (a, z) = (b[0], b[b.len() - 1]);
            return Ok(if frac == 0.5 { 0.5 * (a + z) } else { a + frac * (z - a) });
        }
        let total: f64 = masses.iter().sum();
        invert_slabs(&masses, &b, axis, frac * total, q.hi[axis])
    }
}

fn invert_slabs(masses: &[f64], b: &[f64], axis: usize, target: f64, end: f64) -> Result<f64> {
    let total: f64 = masses.iter().sum();
    if !(target >= 0.0 && target <= total * (1.0 + 1e-12)) {
        return Err(Error::RootFinder(format!("target mass {target} outside [0, {total}] on axis {axis}")));
    }
    let mut acc = 0.0;
    for (j, &m) in masses.iter().enumerate() {
        if m > 0.0 && acc + m >= target {
            let t = b[j] + (target - acc) / m * (b[j + 1] - b[j]);
            return Ok(t.clamp(b[j], b[j + 1]));
        }
        acc += m;
    }
    Ok(end)
}

fn piece_of(map: &MonotoneMap1D, x: f64) -> usize {
    let p = map.pieces();
    p.partition_point(|q| q.x1 < x).min(p.len() - 1)
}

/// `cells + 1` evenly spaced breaks with exact endpoints.
pub fn grid_breaks(lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    let mut b: Vec<f64> = (0..=cells).map(|i| lo + (hi - lo) * i as f64 / cells as f64).collect();
    b[0] = lo;
    b[cells] = hi;
    b
}

/// Breaks strictly inside `(lo, hi)` plus the two endpoints.
pub fn clip_breaks(b: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut out = vec![lo];
    out.extend(b.iter().copied().filter(|&t| t > lo && t < hi));
    out.push(hi);
    out
}

pub fn merge_breaks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b).copied().collect();
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out.dedup();
    out
}

/// Tensor field on `bx` assembled from fields on sub-boxes of it; cells
/// not covered by any part get `0`.
pub fn rasterize(bx: &Aabb, parts: &[&CellField]) -> Result<CellField> {
    let d = bx.dim();
    let mut breaks: Vec<Vec<f64>> = (0..d).map(|a| vec![bx.lo[a], bx.hi[a]]).collect();
    for p in parts {
        for a in 0..d {
            let clipped = clip_breaks(&p.breaks[a], bx.lo[a], bx.hi[a]);
            breaks[a] = merge_breaks(&breaks[a], &clipped);
            for t in [p.bx.lo[a], p.bx.hi[a]] {
                if t > bx.lo[a] && t < bx.hi[a] {
                    breaks[a] = merge_breaks(&breaks[a], &[t]);
                }
            }
        }
    }
    let mut out = CellField { bx: bx.clone(), breaks, values: Vec::new() };
    out.values = (0..out.cell_count())
        .map(|k| {
            let c = out.cell_box(k).center();
            parts.iter().find(|p| p.bx.contains(&c)).map_or(0.0, |p| p.eval(&c))
        })
        .collect();
    CellField::new(out.bx, out.breaks, out.values)
}
