//! Telescoping multiscale transports on a box.
//!
//! * [`uniform_to_density`] and [`density_to_uniform`] walk the Lebesgue
//!   bisection levels `G_k`, moving the level-`k` averages `rho_k` to
//!   `rho_{k+1}` one box at a time by two-valued monotone maps.
//! * [`density_to_density`] keeps the common part of two densities in place
//!   and sends the remainder through such a chain.
//! * [`empirical_coupling_highd`] walks the `nu`-bisection levels `F_k` up
//!   to the cutoff `k_n` and then hands every sample its own cell.

use crate::density::Density;
use crate::error::{Error, Result};
use crate::field::{CellField, MassOracle};
use crate::geometry::Aabb;
use crate::knothe::{knothe_ordered, knothe_stages};
use crate::sampling::EmpiricalMeasure;
use crate::stage::{AtomStage, AxisStage, ComposedTransport, LocalStage, MixtureStage, Stage};
use crate::transport1d::{cdf_transport, MonotoneMap1D, PiecewiseConstantDensity1D};

/// Deepest level ever built.
pub const MAX_DEPTH: u32 = 40;

/// The single field of a density whose domain is one box.
pub fn box_field(density: &Density) -> Result<&CellField> {
    let fields = density.fields()?;
    match fields {
        [f] => Ok(f),
        _ => Err(Error::Unsupported(format!(
            "box transport needs a one-box domain, got {} boxes",
            fields.len()
        ))),
    }
}

/// Smallest and largest value of `rho` on cells meeting `q` in positive
/// volume.
fn value_range(rho: &CellField, q: &Aabb) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let values = rho.values();
    rho.for_each_overlap(q, |flat, _| {
        lo = lo.min(values[flat]);
        hi = hi.max(values[flat]);
    });
    (lo, hi)
}

fn constant_on(rho: &CellField, q: &Aabb) -> bool {
    let (lo, hi) = value_range(rho, q);
    lo == hi
}

/// Largest `|rho - a|` over the box.
fn sup_deviation(rho: &CellField, a: f64) -> f64 {
    (rho.max_value() - a).abs().max((a - rho.min_value()).abs())
}

/// Smallest `k` with `2^{-k/d} <= rel`, capped at [`MAX_DEPTH`].
pub fn auto_depth(rel: f64, d: usize) -> u32 {
    if !(rel > 0.0) {
        return MAX_DEPTH;
    }
    if rel >= 1.0 {
        return 0;
    }
    let mut k = (d as f64 * (1.0 / rel).log2()).ceil().max(0.0) as u32;
    while k > 0 && 2f64.powf(-((k - 1) as f64) / d as f64) <= rel {
        k -= 1;
    }
    while 2f64.powf(-(k as f64) / d as f64) > rel {
        k += 1;
    }
    k.min(MAX_DEPTH)
}

/// Monotone map on `[lo, hi]` between the uniform law and the law with
/// masses `m1`, `m2` on `[lo, mid]`, `[mid, hi]`; reversed on request.
fn split_map(lo: f64, mid: f64, hi: f64, m1: f64, m2: f64, reverse: bool) -> Result<MonotoneMap1D> {
    let total = m1 + m2;
    let uniform = PiecewiseConstantDensity1D::uniform(lo, hi, 1.0 / (hi - lo))?;
    let split = PiecewiseConstantDensity1D::new(
        vec![lo, mid, hi],
        vec![m1 / total / (mid - lo), m2 / total / (hi - mid)],
    )?;
    if reverse {
        cdf_transport(&split, &uniform)
    } else {
        cdf_transport(&uniform, &split)
    }
}

/// Knothe-Rosenblatt stage on the whole box of `src`, certified by `bound`.
fn knothe_stage(src: &CellField, tgt: &CellField, bound: f64) -> Result<Stage> {
    let order: Vec<usize> = (0..src.dim()).collect();
    let t = knothe_stages(src, tgt, &order)?;
    Ok(Stage::local_with_bound(LocalStage::new(vec![(vec![src.bbox().clone()], t)]), bound))
}

/// Transport from the uniform law of the same mass on `rho`'s box to
/// `rho`. `depth = None` picks the smallest `k` with
/// `2^{-k/d} <= ||rho - a||_inf / a`.
pub fn uniform_to_density(rho: &CellField, depth: Option<u32>) -> Result<ComposedTransport> {
    lebesgue_chain(rho, depth, false)
}

/// Transport from `rho` to the uniform law of the same mass on its box.
pub fn density_to_uniform(rho: &CellField, depth: Option<u32>) -> Result<ComposedTransport> {
    lebesgue_chain(rho, depth, true)
}

fn lebesgue_chain(rho: &CellField, depth: Option<u32>, reverse: bool) -> Result<ComposedTransport> {
    let bx = rho.bbox().clone();
    let d = bx.dim();
    let mass = rho.mass();
    if !(mass > 0.0) {
        return Err(Error::InvalidDensity("density has no mass".into()));
    }
    let a = mass / bx.volume();
    let delta = sup_deviation(rho, a);
    if delta == 0.0 {
        return Ok(ComposedTransport::identity());
    }
    let uniform = CellField::constant(bx.clone(), a);
    if delta > 0.5 * a {
        let stage = if reverse {
            knothe_stage(rho, &uniform, bx.diameter())?
        } else {
            knothe_stage(&uniform, rho, bx.diameter())?
        };
        return Ok(ComposedTransport::from_stages(vec![stage.as_terminal()]));
    }
    let depth = depth.unwrap_or_else(|| auto_depth(delta / a, d)).min(MAX_DEPTH);

    let mut levels: Vec<Stage> = Vec::new();
    let mut boxes = vec![bx.clone()];
    for k in 0..depth {
        let mut next = Vec::with_capacity(2 * boxes.len());
        let mut entries = Vec::new();
        for q in boxes {
            if constant_on(rho, &q) {
                continue;
            }
            let axis = q.longest_axis();
            let mid = 0.5 * (q.lo[axis] + q.hi[axis]);
            let (q1, q2) = q.split(axis, mid);
            let (m1, m2) = (rho.mass_in(&q1), rho.mass_in(&q2));
            if m1 * q2.volume() != m2 * q1.volume() {
                entries.push((q.clone(), axis, split_map(q.lo[axis], mid, q.hi[axis], m1, m2, reverse)?));
            }
            next.push(q1);
            next.push(q2);
        }
        if !entries.is_empty() {
            let stage = AxisStage::new(entries);
            let b = stage.sup_displacement();
            levels.push(Stage::axis(stage, b).at_level(k));
        }
        boxes = next;
    }

    // Within each remaining box `rho_k` is constant; finish with a
    // Knothe-Rosenblatt map whose displacement is at most the box diameter.
    let mut regions = Vec::new();
    let mut terminal = 0.0f64;
    for q in boxes {
        if constant_on(rho, &q) {
            continue;
        }
        let fine = rho.restrict(&q)?;
        let flat = CellField::constant(q.clone(), fine.mass() / q.volume());
        let order: Vec<usize> = (0..d).collect();
        let t = if reverse { knothe_stages(&fine, &flat, &order)? } else { knothe_stages(&flat, &fine, &order)? };
        terminal = terminal.max(q.diameter());
        regions.push((vec![q], t));
    }
    let last = (!regions.is_empty())
        .then(|| Stage::local_with_bound(LocalStage::new(regions), terminal).as_terminal());

    let mut out = ComposedTransport::identity();
    if reverse {
        out.extend(last);
        out.extend(levels.into_iter().rev());
    } else {
        out.extend(levels);
        out.extend(last);
    }
    Ok(out)
}

/// Mixture transport from `rho1` to `rho2` (equal masses, same box), both
/// within the ratio `lambda` of their mean.
///
/// With `a = min(mean / lambda, min rho2)` the common part `rho2 - a`
/// stays in place and `g = rho1 - rho2 + a` is carried onto the constant
/// `a` by [`density_to_uniform`]. When `||rho1 - rho2||_inf > a / 2` the
/// Knothe-Rosenblatt map is returned with the box diameter as bound.
pub fn density_to_density(rho1: &CellField, rho2: &CellField, lambda: f64) -> Result<ComposedTransport> {
    let bx = rho1.bbox().clone();
    if rho2.bbox() != &bx {
        return Err(Error::InvalidBox("densities live on different boxes".into()));
    }
    let (m1, m2) = (rho1.mass(), rho2.mass());
    if (m1 - m2).abs() > 1e-9 * m1.max(m2) {
        return Err(Error::UnequalMasses(m1, m2));
    }
    if !(lambda >= 1.0) {
        return Err(Error::Config(format!("lambda must be at least 1, got {lambda}")));
    }
    let delta = rho1.sup_abs_diff(rho2)?;
    if delta == 0.0 {
        return Ok(ComposedTransport::identity());
    }
    let mean = m2 / bx.volume();
    let a = (mean / lambda).min(rho2.min_value());
    if !(delta <= 0.5 * a) {
        let stage = knothe_stage(rho1, rho2, bx.diameter())?;
        return Ok(ComposedTransport::from_stages(vec![stage.as_terminal()]));
    }
    let keep = rho1.combine(rho2, |r1, r2| ((r2 - a) / r1).clamp(0.0, 1.0))?;
    let g = rho1.combine(rho2, |r1, r2| (r1 - r2 + a).max(0.0))?;
    let moved = density_to_uniform(&g, None)?;
    Ok(ComposedTransport::from_stages(vec![Stage::mixture(MixtureStage::new(keep, moved))]))
}

/// Parameters of the density-to-empirical coupling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighdOptions {
    /// Confidence exponent `alpha > 2`.
    pub alpha: f64,
    /// Constant `c` in `k_n = floor(log2(n / (c alpha ln n)))`.
    pub kn_constant: f64,
}

impl Default for HighdOptions {
    fn default() -> Self {
        Self { alpha: 3.0, kn_constant: 10.0 }
    }
}

/// `floor(log2(n / (c alpha ln n)))`, or `-1` when `n < 2`.
pub fn cutoff_depth(n: usize, alpha: f64, c: f64) -> i64 {
    if n < 2 {
        return -1;
    }
    let n = n as f64;
    (n / (c * alpha * n.ln())).log2().floor() as i64
}

/// A density-to-empirical transport and how it was built.
#[derive(Clone, Debug)]
pub struct EmpiricalCoupling {
    pub transport: ComposedTransport,
    /// Number of `nu`-bisection levels before the terminal stage.
    pub depth: u32,
    /// The level-`depth` boxes (including empty ones).
    pub leaves: Vec<Aabb>,
    /// Set when `d < 3`, where this scheme is not rate-optimal.
    pub low_dim: bool,
}

struct Node {
    bx: Aabb,
    idx: Vec<usize>,
}

/// Couples `rho` (a field on a box) with the empirical measure `sample`.
///
/// Levels `k < k_n` bisect every box through its longest side into two
/// halves of equal `rho`-mass and move `mu_k = (nu_n(Q) / nu(Q)) rho` to
/// `mu_{k+1}`. Boxes where `rho` is constant use one monotone map on the
/// split axis; other boxes use a Knothe-Rosenblatt map with its exact
/// displacement. Each level-`k_n` box is then cut by sample counts until
/// every cell holds one sample, which receives the cell's mass.
pub fn empirical_coupling_highd(
    rho: &CellField,
    sample: &EmpiricalMeasure,
    opts: HighdOptions,
) -> Result<EmpiricalCoupling> {
    let bx = rho.bbox().clone();
    let d = bx.dim();
    if sample.dim() != d {
        return Err(Error::Dimension { expected: d, got: sample.dim() });
    }
    if let Some(p) = sample.points.iter().find(|p| !bx.contains(p)) {
        return Err(Error::Config(format!("sample point {p:?} lies outside the box")));
    }
    if !(opts.alpha > 0.0 && opts.kn_constant > 0.0) {
        return Err(Error::Config("alpha and the cutoff constant must be positive".into()));
    }
    let n = sample.n();
    let depth = cutoff_depth(n, opts.alpha, opts.kn_constant).clamp(0, MAX_DEPTH as i64) as u32;
    let pts = &sample.points;
    let mut nodes = vec![Node { bx: bx.clone(), idx: (0..n).collect() }];
    let mut out = ComposedTransport::identity();
    for k in 0..depth {
        let mut next = Vec::with_capacity(2 * nodes.len());
        let mut axis_entries = Vec::new();
        let mut regions = Vec::new();
        for node in nodes {
            if node.idx.is_empty() {
                continue;
            }
            let q = node.bx;
            let axis = q.longest_axis();
            let nu_q = rho.mass_in(&q);
            let s = rho.split_at_mass(&q, axis, 0.5 * nu_q)?;
            let (q1, q2) = q.split(axis, s);
            let (i1, i2): (Vec<usize>, Vec<usize>) = node.idx.iter().partition(|&&i| pts[i][axis] < s);
            let (n1, n2) = (i1.len() as f64, i2.len() as f64);
            if i1.len() != i2.len() {
                if constant_on(rho, &q) {
                    axis_entries.push((q.clone(), axis, split_map(q.lo[axis], s, q.hi[axis], n1, n2, false)?));
                } else {
                    let c = (n1 + n2) / nu_q;
                    let src = rho.restrict(&q)?.scaled(c);
                    let mut breaks: Vec<Vec<f64>> = (0..d).map(|a| vec![q.lo[a], q.hi[a]]).collect();
                    breaks[axis] = vec![q.lo[axis], s, q.hi[axis]];
                    let weights = CellField::new(q.clone(), breaks, vec![2.0 * n1 / nu_q, 2.0 * n2 / nu_q])?;
                    let tgt = rho.restrict(&q)?.combine(&weights, |r, w| r * w)?;
                    regions.push((vec![q.clone()], knothe_ordered(&src, &tgt, &(0..d).collect::<Vec<_>>())?));
                }
            }
            next.push(Node { bx: q1, idx: i1 });
            next.push(Node { bx: q2, idx: i2 });
        }
        if regions.is_empty() {
            if !axis_entries.is_empty() {
                let stage = AxisStage::new(axis_entries);
                let b = stage.sup_displacement();
                out.push(Stage::axis(stage, b).at_level(k));
            }
        } else {
            for (q, axis, map) in axis_entries {
                let b = map.sup_displacement();
                let t = ComposedTransport::from_stages(vec![Stage::axis(AxisStage::new(vec![(q.clone(), axis, map)]), b)]);
                regions.push((vec![q], t));
            }
            out.push(Stage::local(LocalStage::new(regions)).at_level(k));
        }
        nodes = next;
    }

    let leaves: Vec<Aabb> = nodes.iter().map(|nd| nd.bx.clone()).collect();
    let mut cells = Vec::with_capacity(n);
    let mut atoms = Vec::with_capacity(n);
    for node in nodes {
        count_bisect(rho, pts, node.bx, node.idx, &mut cells, &mut atoms)?;
    }
    out.push(Stage::atoms(AtomStage::new(cells, atoms)).at_level(depth));
    Ok(EmpiricalCoupling { transport: out, depth, leaves, low_dim: d < 3 })
}

/// Cuts `q` by `rho`-mass in proportion to sample counts until every cell
/// holds one sample. Samples are ranked along the split axis, so the cells
/// always match counts even when a sample sits off its cell.
fn count_bisect(
    rho: &CellField,
    pts: &[Vec<f64>],
    q: Aabb,
    mut idx: Vec<usize>,
    cells: &mut Vec<Aabb>,
    atoms: &mut Vec<Vec<f64>>,
) -> Result<()> {
    match idx.len() {
        0 => Ok(()),
        1 => {
            cells.push(q);
            atoms.push(pts[idx[0]].clone());
            Ok(())
        }
        m => {
            let axis = q.longest_axis();
            let h = m / 2;
            idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
            let s = rho.split_at_mass(&q, axis, rho.mass_in(&q) * h as f64 / m as f64)?;
            let upper = idx.split_off(h);
            let (q1, q2) = q.split(axis, s);
            count_bisect(rho, pts, q1, idx, cells, atoms)?;
            count_bisect(rho, pts, q2, upper, cells, atoms)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::{fragments_of, mass_in};
    use proptest::prelude::*;

    fn grid(d: usize, cells: &[usize], values: Vec<f64>) -> CellField {
        let f = CellField::uniform_grid(Aabb::unit(d), cells, values).unwrap();
        let m = f.mass();
        f.scaled(1.0 / m)
    }

    fn assert_pushes(src: &CellField, tgt: &CellField, t: &ComposedTransport) {
        let out = t.pushforward(fragments_of(std::slice::from_ref(src)));
        for (cell, v) in tgt.cells() {
            let got = mass_in(&out, &cell);
            assert!((got - v * cell.volume()).abs() < 1e-9, "{cell:?}: {got} vs {}", v * cell.volume());
        }
    }

    fn assert_probes(t: &ComposedTransport, d: usize) {
        let b = t.certified_bound();
        let m: usize = if d == 2 { 40 } else { 12 };
        for i in 0..m.pow(d as u32) {
            let x: Vec<f64> = (0..d).map(|a| ((i / m.pow(a as u32)) % m) as f64 / m as f64 + 0.31 / m as f64).collect();
            assert!(t.displacement(&x) <= b + 1e-9);
        }
    }

    #[test]
    fn auto_depth_matches_definition() {
        assert_eq!(auto_depth(0.5, 2), 2);
        assert_eq!(auto_depth(0.1, 2), 7);
        assert_eq!(auto_depth(0.1, 3), 10);
        assert_eq!(auto_depth(1.0, 3), 0);
    }

    #[test]
    fn constant_density_is_identity() {
        let rho = CellField::constant(Aabb::unit(2), 1.0);
        let t = uniform_to_density(&rho, None).unwrap();
        assert!(t.stages().is_empty());
        assert_eq!(t.certified_bound(), 0.0);
    }

    #[test]
    fn two_valued_level_zero_moves_a_quarter() {
        let rho = grid(2, &[2, 1], vec![1.5, 0.5]);
        let t = uniform_to_density(&rho, None).unwrap();
        assert_eq!(t.stages().len(), 1);
        assert_eq!(t.stages()[0].level, Some(0));
        assert!((t.certified_bound() - 0.25).abs() < 1e-15);
        assert!((t.displacement(&[0.75, 0.3]) - 0.25).abs() < 1e-15);
        assert_pushes(&CellField::constant(Aabb::unit(2), 1.0), &rho, &t);
    }

    #[test]
    fn large_deviation_takes_trivial_branch() {
        let rho = grid(2, &[2, 2], vec![0.2, 1.0, 1.0, 1.8]);
        let t = uniform_to_density(&rho, None).unwrap();
        assert_eq!(t.certified_bound(), 2f64.sqrt());
        assert_pushes(&CellField::constant(Aabb::unit(2), 1.0), &rho, &t);
    }

    #[test]
    fn density_to_density_cases() {
        let a = grid(2, &[2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(density_to_density(&a, &a, 2.0).unwrap().certified_bound(), 0.0);
        let far = grid(2, &[2, 1], vec![1.45, 0.55]);
        let t = density_to_density(&a, &far, 2.0).unwrap();
        assert_eq!(t.certified_bound(), 2f64.sqrt());
        let near = grid(2, &[2, 2], vec![1.1, 0.9, 0.95, 1.05]);
        let t = density_to_density(&a, &near, 2.0).unwrap();
        assert_pushes(&a, &near, &t);
        assert_probes(&t, 2);
        assert!(t.certified_bound() < 2f64.sqrt());
    }

    #[test]
    fn unequal_masses_are_rejected() {
        let a = CellField::constant(Aabb::unit(2), 1.0);
        let b = CellField::constant(Aabb::unit(2), 1.1);
        assert!(matches!(density_to_density(&a, &b, 2.0), Err(Error::UnequalMasses(..))));
    }

    #[test]
    fn cutoff_depth_values() {
        assert_eq!(cutoff_depth(1 << 15, 3.0, 10.0), 6);
        assert_eq!(cutoff_depth(1, 3.0, 10.0), -1);
        assert!(cutoff_depth(100, 3.0, 10.0) < 1);
    }

    fn sample_pts(n: usize, d: usize, seed: u64) -> EmpiricalMeasure {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        EmpiricalMeasure::from_points((0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect()).unwrap()
    }

    fn assert_atoms(rho: &CellField, s: &EmpiricalMeasure, c: &EmpiricalCoupling) {
        let out = c.transport.pushforward(fragments_of(std::slice::from_ref(rho)));
        let total: f64 = out.iter().map(|f| f.mass).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for leaf in &c.leaves {
            let want = s.mass_in(leaf);
            assert!((mass_in(&out, leaf) - want).abs() < 1e-9);
        }
        let mut per_atom: std::collections::HashMap<Vec<u64>, f64> = Default::default();
        for f in &out {
            assert!(f.bx.is_degenerate());
            *per_atom.entry(f.bx.lo.iter().map(|v| v.to_bits()).collect()).or_default() += f.mass;
        }
        assert_eq!(per_atom.len(), s.n());
        for m in per_atom.values() {
            assert!((m - s.weight()).abs() < 1e-9);
        }
    }

    #[test]
    fn single_sample_takes_all_mass() {
        let rho = CellField::constant(Aabb::unit(3), 1.0);
        let s = EmpiricalMeasure::from_points(vec![vec![0.2, 0.5, 0.9]]).unwrap();
        let c = empirical_coupling_highd(&rho, &s, HighdOptions::default()).unwrap();
        assert_eq!(c.depth, 0);
        let far = Aabb::unit(3).farthest_distance(&[0.2, 0.5, 0.9]);
        assert_eq!(c.transport.certified_bound(), far);
        assert_eq!(c.transport.images(&[0.0, 0.0, 0.0]), vec![vec![0.2, 0.5, 0.9]]);
    }

    #[test]
    fn highd_conserves_mass_uniform() {
        let rho = CellField::constant(Aabb::unit(3), 1.0);
        let s = sample_pts(3000, 3, 5);
        let c = empirical_coupling_highd(&rho, &s, HighdOptions { alpha: 3.0, kn_constant: 1.0 }).unwrap();
        assert!(c.depth >= 3 && !c.low_dim);
        assert_atoms(&rho, &s, &c);
        assert_probes(&c.transport, 3);
    }

    #[test]
    fn highd_conserves_mass_nonuniform() {
        let rho = grid(3, &[2, 3, 2], (0..12).map(|i| 0.6 + 0.1 * i as f64).collect());
        let s = sample_pts(800, 3, 9);
        let c = empirical_coupling_highd(&rho, &s, HighdOptions { alpha: 3.0, kn_constant: 1.0 }).unwrap();
        assert!(c.depth >= 2);
        assert_atoms(&rho, &s, &c);
        assert_probes(&c.transport, 3);
    }

    #[test]
    fn highd_flags_low_dimension() {
        let rho = CellField::constant(Aabb::unit(2), 1.0);
        let s = sample_pts(300, 2, 1);
        let c = empirical_coupling_highd(&rho, &s, HighdOptions { alpha: 3.0, kn_constant: 1.0 }).unwrap();
        assert!(c.low_dim);
        assert_atoms(&rho, &s, &c);
    }

    #[test]
    fn points_outside_the_box_are_rejected() {
        let rho = CellField::constant(Aabb::unit(2), 1.0);
        let s = EmpiricalMeasure::from_points(vec![vec![1.5, 0.5]]).unwrap();
        assert!(empirical_coupling_highd(&rho, &s, HighdOptions::default()).is_err());
    }

    fn near_uniform(d: usize) -> impl Strategy<Value = (CellField, f64)> {
        (proptest::collection::vec(1usize..5, d), 1e-3f64..0.4).prop_flat_map(move |(cells, eps)| {
            let n: usize = cells.iter().product();
            proptest::collection::vec(-1.0f64..1.0, n).prop_map(move |v| {
                let f = grid(d, &cells, v.iter().map(|t| 1.0 + eps * t).collect());
                (f, eps)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn chain_pushes_uniform_onto_density((rho, _) in near_uniform(2)) {
            let uniform = CellField::constant(Aabb::unit(2), 1.0);
            let t = uniform_to_density(&rho, None).unwrap();
            assert_pushes(&uniform, &rho, &t);
            let back = density_to_uniform(&rho, None).unwrap();
            assert_pushes(&rho, &uniform, &back);
            prop_assert!((t.certified_bound() - back.certified_bound()).abs() < 1e-12);
        }

        #[test]
        fn chain_bound_is_linear_in_deviation((rho, _) in near_uniform(2)) {
            let delta = sup_deviation(&rho, 1.0);
            let t = uniform_to_density(&rho, None).unwrap();
            prop_assume!(delta < 0.5);
            prop_assert!(t.certified_bound() <= 8.0 * delta, "{} vs {}", t.certified_bound(), delta);
            assert_probes(&t, 2);
        }

        #[test]
        fn chain_pushes_in_3d((rho, _) in near_uniform(3)) {
            let uniform = CellField::constant(Aabb::unit(3), 1.0);
            let t = uniform_to_density(&rho, None).unwrap();
            assert_pushes(&uniform, &rho, &t);
        }

        #[test]
        fn mixture_pushes_and_is_capped((a, _) in near_uniform(2), (b, _) in near_uniform(2)) {
            let t = density_to_density(&a, &b, 2.0).unwrap();
            assert_pushes(&a, &b, &t);
            prop_assert!(t.certified_bound() <= 2f64.sqrt() + 1e-12);
        }
    }
}
