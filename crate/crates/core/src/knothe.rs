//! Knothe-Rosenblatt rearrangement between piecewise-constant fields on one
//! box.
//!
//! The coupling is built axis by axis: stage `j` moves coordinate `order[j]`
//! by the monotone map between the conditional marginals of source and
//! target, given the coordinates already placed. Within each region used by
//! a stage both conditionals are constant, so every stage is a finite
//! [`AxisStage`] and the whole map stays inside the box.

use crate::error::{Error, Result};
use crate::field::{merge_breaks, CellField};
use crate::geometry::Aabb;
use crate::stage::{fragments_of, AxisStage, ComposedTransport, LocalStage, Stage};
use crate::transport1d::{cdf_transport, MonotoneMap1D, PiecewiseConstantDensity1D, MASS_RTOL};

struct Region {
    /// Current-coordinate box; full extent on axes not yet placed.
    current: Aabb,
    /// A source-coordinate point inside the source cell on placed axes.
    src_pt: Vec<f64>,
}

fn cell_extent(breaks: &[f64], x: f64) -> (f64, f64) {
    let i = breaks.partition_point(|&t| t <= x).saturating_sub(1).min(breaks.len() - 2);
    (breaks[i], breaks[i + 1])
}

fn conditional(
    field: &CellField,
    placed: &[usize],
    at: &[f64],
    axis: usize,
) -> Option<PiecewiseConstantDensity1D> {
    let mut slab = field.bbox().clone();
    for &a in placed {
        let (lo, hi) = cell_extent(&field.breaks()[a], at[a]);
        slab.lo[a] = lo;
        slab.hi[a] = hi;
    }
    let (masses, b) = field.slab_masses(&slab, axis);
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let values = masses.iter().zip(b.windows(2)).map(|(m, w)| m / total / (w[1] - w[0])).collect();
    PiecewiseConstantDensity1D::new(b, values).ok()
}

/// Knothe-Rosenblatt stages pushing `src` onto `tgt` (equal masses, same
/// box), placing axes in `order`.
pub fn knothe_stages(src: &CellField, tgt: &CellField, order: &[usize]) -> Result<ComposedTransport> {
    let bx = src.bbox().clone();
    if tgt.bbox() != &bx {
        return Err(Error::InvalidBox("Knothe coupling needs both fields on one box".into()));
    }
    let (ms, mt) = (src.mass(), tgt.mass());
    if (ms - mt).abs() > MASS_RTOL * ms.max(mt) * 1e3 {
        return Err(Error::UnequalMasses(ms, mt));
    }
    let mut regions = vec![Region { current: bx.clone(), src_pt: bx.center() }];
    let mut out = ComposedTransport::identity();
    for (j, &axis) in order.iter().enumerate() {
        let placed = &order[..j];
        let mut entries = Vec::with_capacity(regions.len());
        let mut next = Vec::new();
        for r in &regions {
            let tgt_pt = r.current.center();
            let map = match (
                conditional(src, placed, &r.src_pt, axis),
                conditional(tgt, placed, &tgt_pt, axis),
            ) {
                (Some(s), Some(t)) => cdf_transport(&s, &t)?,
                _ => MonotoneMap1D::identity(bx.lo[axis], bx.hi[axis]),
            };
            if j + 1 < order.len() {
                let mut cuts: Vec<f64> = map.pieces().iter().flat_map(|p| [p.eval(p.x0), p.eval(p.x1)]).collect();
                cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let cuts = merge_breaks(&cuts, &tgt.breaks()[axis]);
                for w in cuts.windows(2) {
                    let (y0, y1) = (w[0].max(bx.lo[axis]), w[1].min(bx.hi[axis]));
                    if !(y1 > y0) {
                        continue;
                    }
                    let mut src_pt = r.src_pt.clone();
                    src_pt[axis] = map.preimage(0.5 * (y0 + y1));
                    next.push(Region { current: r.current.with_axis(axis, y0, y1), src_pt });
                }
            }
            if !map.is_identity() {
                entries.push((r.current.clone(), axis, map));
            }
        }
        if !entries.is_empty() {
            let stage = AxisStage::new(entries);
            let b = stage.sup_displacement();
            out.push(Stage::axis(stage, b));
        }
        regions = next;
    }
    Ok(out)
}

/// Knothe-Rosenblatt transport wrapped as one stage whose bound is the
/// exact sup-displacement over the source support.
pub fn knothe(src: &CellField, tgt: &CellField) -> Result<ComposedTransport> {
    let order: Vec<usize> = (0..src.dim()).collect();
    knothe_ordered(src, tgt, &order)
}

pub fn knothe_ordered(src: &CellField, tgt: &CellField, order: &[usize]) -> Result<ComposedTransport> {
    let inner = knothe_stages(src, tgt, order)?;
    if inner.stages().is_empty() {
        return Ok(inner);
    }
    let support: Vec<Aabb> = fragments_of(std::slice::from_ref(src)).into_iter().map(|f| f.bx).collect();
    let exact = inner.exact_axis_sup(&support).unwrap_or_else(|| inner.certified_bound());
    let bound = exact.min(inner.certified_bound());
    let region = vec![(vec![src.bbox().clone()], inner)];
    Ok(ComposedTransport::from_stages(vec![Stage::local_with_bound(LocalStage::new(region), bound)]))
}
