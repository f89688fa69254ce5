//! Box-union domains: leaf-removal decomposition, gates between a removed
//! box and its neighbour, the gate homeomorphism, and the rebalanced
//! recursive transports.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::field::{rasterize, CellField, MassOracle};
use crate::geometry::{Aabb, BoxUnionDomain, Facet};
use crate::matching::hall_matching_2d;
use crate::multiscale::{density_to_density, empirical_coupling_highd, HighdOptions};
use crate::partition::rectangle_partition_n;
use crate::sampling::EmpiricalMeasure;
use crate::stage::{AxisStage, ComposedTransport, LocalStage, Stage};
use crate::transport1d::MonotoneMap1D;

/// One leaf removal: `leaf` leaves the domain through `facet`, shared with
/// its tree parent `parent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalStep {
    pub leaf: usize,
    pub parent: usize,
    pub facet: usize,
}

/// Spanning tree of the facet-adjacency graph and a leaf-removal order.
#[derive(Clone, Debug)]
pub struct WpDecomposition {
    pub domain: BoxUnionDomain,
    pub root: usize,
    /// `(parent, child)` tree edges in BFS order.
    pub tree_edges: Vec<(usize, usize)>,
    pub order: Vec<RemovalStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WpExport {
    pub tree_edges: Vec<(usize, usize)>,
    pub removal_order: Vec<RemovalStep>,
    pub gates: Vec<Gate>,
}

impl WpDecomposition {
    /// Boxes still present before step `s`.
    pub fn active_before(&self, s: usize) -> Vec<bool> {
        let mut active = vec![false; self.domain.boxes().len()];
        active[self.root] = true;
        for st in &self.order[s..] {
            active[st.leaf] = true;
        }
        active
    }

    /// Whether the remaining boxes stay connected after every removal.
    pub fn connectivity_preserved(&self) -> bool {
        (0..=self.order.len()).all(|s| self.domain.components(&self.active_before(s)).len() == 1)
    }

    pub fn gate(&self, s: usize) -> Result<Gate> {
        let st = &self.order[s];
        let b = self.domain.boxes();
        build_gate(&b[st.leaf], &b[st.parent], &self.domain.facets()[st.facet])
    }

    pub fn export(&self) -> Result<WpExport> {
        Ok(WpExport {
            tree_edges: self.tree_edges.clone(),
            removal_order: self.order.clone(),
            gates: (0..self.order.len()).map(|s| self.gate(s)).collect::<Result<_>>()?,
        })
    }
}

/// BFS spanning tree from the box with the lexicographically smallest
/// `lo` corner; leaves are removed in reverse BFS order.
pub fn build_wp(domain: &BoxUnionDomain) -> Result<WpDecomposition> {
    let boxes = domain.boxes();
    let comps = domain.components(&vec![true; boxes.len()]);
    if comps.len() > 1 {
        return Err(Error::Disconnected(comps));
    }
    let root = (0..boxes.len()).min_by(|&a, &b| boxes[a].cmp_lo(&boxes[b])).unwrap_or(0);
    let mut seen = vec![false; boxes.len()];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    let mut tree_edges = Vec::new();
    let mut steps = Vec::new();
    while let Some(v) = queue.pop_front() {
        let mut next: Vec<(usize, usize)> = domain
            .incident(v)
            .iter()
            .map(|&f| (domain.facets()[f].other(v), f))
            .filter(|&(w, _)| !seen[w])
            .collect();
        next.sort_by(|a, b| boxes[a.0].cmp_lo(&boxes[b.0]).then(a.1.cmp(&b.1)));
        for (w, f) in next {
            if seen[w] {
                continue;
            }
            // Widest facet towards the parent.
            let facet = domain
                .incident(w)
                .iter()
                .copied()
                .filter(|&g| domain.facets()[g].other(w) == v)
                .max_by(|&a, &b| domain.facets()[a].measure().total_cmp(&domain.facets()[b].measure()).then(b.cmp(&a)))
                .unwrap_or(f);
            seen[w] = true;
            queue.push_back(w);
            tree_edges.push((v, w));
            steps.push(RemovalStep { leaf: w, parent: v, facet });
        }
    }
    steps.reverse();
    Ok(WpDecomposition { domain: domain.clone(), root, tree_edges, order: steps })
}

/// Prisms over a patch of the facet between a leaf box and its neighbour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub axis: usize,
    /// `+1` when the neighbour lies above the facet on `axis`.
    pub sign: f64,
    /// Facet coordinate on `axis`.
    pub coord: f64,
    pub center: Vec<f64>,
    pub r: f64,
    /// Patch of the facet, degenerate along `axis`.
    pub patch: Aabb,
    /// Prism of thickness `r` on the neighbour side.
    pub c1: Aabb,
    /// Prism of thickness `r` on the leaf side.
    pub c_minus1: Aabb,
    /// Prism of thickness `r/2` on the leaf side.
    pub c_minus_half: Aabb,
}

/// Gate with `r = min(min side of F, thickness of the leaf, thickness of
/// the neighbour) / 2` over the patch of half-width `r/2` centred on `F`.
pub fn build_gate(leaf: &Aabb, neighbor: &Aabb, facet: &Facet) -> Result<Gate> {
    let axis = facet.axis;
    let d = leaf.dim();
    let min_side = (0..d).filter(|&a| a != axis).map(|a| facet.region.side(a)).fold(f64::INFINITY, f64::min);
    if !(facet.measure() > 0.0) {
        return Err(Error::DegenerateFacet(facet.lower, facet.upper));
    }
    let r = 0.5 * min_side.min(leaf.side(axis)).min(neighbor.side(axis));
    let center = facet.region.center();
    let mut lo = center.clone();
    let mut hi = center.clone();
    for a in (0..d).filter(|&a| a != axis) {
        lo[a] = center[a] - 0.5 * r;
        hi[a] = center[a] + 0.5 * r;
    }
    let sign = if neighbor.center()[axis] > leaf.center()[axis] { 1.0 } else { -1.0 };
    Ok(Gate::over(Aabb::closed(lo, hi), axis, sign, facet.coord, center, r))
}

impl Gate {
    fn over(patch: Aabb, axis: usize, sign: f64, coord: f64, center: Vec<f64>, r: f64) -> Self {
        let prism = |t: f64| {
            let (a, b) = if t * sign > 0.0 { (coord, coord + t) } else { (coord + t, coord) };
            patch.with_axis(axis, a.min(b), a.max(b))
        };
        Self {
            axis,
            sign,
            coord,
            r,
            c1: prism(sign * r),
            c_minus1: prism(-sign * r),
            c_minus_half: prism(-sign * 0.5 * r),
            patch,
            center,
        }
    }

    /// The same gate over the whole facet when the facet is an entire face
    /// of `leaf`; then `leaf ∪ C_1` is a box and the gate map is globally
    /// bi-Lipschitz on it.
    pub fn widened(&self, leaf: &Aabb, facet: &Facet) -> Option<Self> {
        let full = (0..leaf.dim())
            .filter(|&a| a != self.axis)
            .all(|a| facet.region.lo[a] == leaf.lo[a] && facet.region.hi[a] == leaf.hi[a]);
        full.then(|| Self::over(facet.region.clone(), self.axis, self.sign, self.coord, self.center.clone(), self.r))
    }

    /// `C_{-1} ∪ C_1`.
    pub fn column(&self) -> Aabb {
        self.c1.union_hull(&self.c_minus1)
    }
}

/// Piecewise-linear gate map `psi: D'' ∪ C_1 -> D''`: on each column along
/// the gate axis `y_1 -> y`, `y -> y_{-1/2}`, `y_{-1} -> y_{-1}`; identity
/// off the column.
#[derive(Clone, Debug)]
pub struct GateMap {
    pub axis: usize,
    /// `C_{-1} ∪ C_1`, where `psi` moves points.
    pub column: Aabb,
    /// `C_{-1}`, where `psi^{-1}` moves points.
    pub image: Aabb,
    pub forward: MonotoneMap1D,
    pub inverse: MonotoneMap1D,
    /// Largest slope of `psi` along the column (at least 1 from the identity part).
    pub lip: f64,
    pub lip_inv: f64,
}

pub fn gate_homeomorphism(gate: &Gate) -> GateMap {
    let (c, s, r) = (gate.coord, gate.sign, gate.r);
    let mut anchors = vec![(c - s * r, c - s * r), (c, c - s * 0.5 * r), (c + s * r, c)];
    anchors.sort_by(|a, b| a.0.total_cmp(&b.0));
    let forward = MonotoneMap1D::interpolating(&anchors);
    let inverse = forward.inverse().expect("gate map is strictly increasing");
    let slopes: Vec<f64> = forward.pieces().iter().map(|p| p.slope).collect();
    let lip = slopes.iter().cloned().fold(1.0, f64::max);
    let lip_inv = slopes.iter().map(|s| 1.0 / s).fold(1.0, f64::max);
    GateMap { axis: gate.axis, column: gate.column(), image: gate.c_minus1.clone(), forward, inverse, lip, lip_inv }
}

impl GateMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if self.column.contains(x) {
            y[self.axis] = self.forward.eval(x[self.axis]);
        }
        y
    }

    pub fn apply_inverse(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        if self.image.contains(y) {
            x[self.axis] = self.inverse.eval(y[self.axis]);
        }
        x
    }

    pub fn forward_stage(&self) -> Stage {
        let s = AxisStage::new(vec![(self.column.clone(), self.axis, self.forward.clone())]);
        let b = s.sup_displacement();
        Stage::axis(s, b)
    }

    pub fn inverse_stage(&self) -> Stage {
        let s = AxisStage::new(vec![(self.image.clone(), self.axis, self.inverse.clone())]);
        let b = s.sup_displacement();
        Stage::axis(s, b)
    }

    /// Pushforward of the piecewise-constant density given by `leaf_field`
    /// on the leaf box and `gate_field` on `C_1`, as a field on the leaf box.
    fn push_density(&self, leaf_field: &CellField, gate_field: &CellField) -> Result<CellField> {
        let lower = leaf_field.restrict(&self.image)?;
        let col = rasterize(&self.column, &[&lower, gate_field])?;
        let pushed = col.pushforward_axis(self.axis, &self.forward)?;
        rasterize(leaf_field.bbox(), &[&pushed, leaf_field])
    }
}

/// Per-step record of the rebalancing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub leaf: usize,
    pub beta: f64,
    /// Whether the gate covers the whole shared facet.
    pub widened: bool,
    /// Sup-distance between `rho~_1` and `rho_1`.
    pub rebalance_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct WpTransport {
    pub transport: ComposedTransport,
    pub steps: Vec<StepReport>,
    /// Set when `||rho1 - rho2||` exceeds `mean / (2 lambda)`, where only
    /// the diameter bound is meaningful.
    pub fallback: bool,
}

/// Inner splits use `a = min rho2`, the largest admissible common level.
struct Ctx<'a> {
    dec: &'a WpDecomposition,
    steps: Vec<StepReport>,
}

fn active_boxes(dec: &WpDecomposition, s: usize) -> Vec<Aabb> {
    let act = dec.active_before(s);
    dec.domain.boxes().iter().zip(act).filter(|(_, a)| *a).map(|(b, _)| b.clone()).collect()
}

fn sup_diff(a: &[CellField], b: &[CellField], active: &[bool]) -> Result<f64> {
    let mut m = 0.0f64;
    for i in (0..a.len()).filter(|&i| active[i]) {
        m = m.max(a[i].sup_abs_diff(&b[i])?);
    }
    Ok(m)
}

/// Transport from `f1` to `f2` (per-box fields of equal total mass on the
/// boxes active before step `s`).
fn d2d_rec(ctx: &mut Ctx<'_>, s: usize, f1: &[CellField], f2: &[CellField]) -> Result<ComposedTransport> {
    let dec = ctx.dec;
    if s == dec.order.len() {
        return density_to_density(&f1[dec.root], &f2[dec.root], 1.0);
    }
    let st = dec.order[s].clone();
    let boxes = dec.domain.boxes();
    let facet = &dec.domain.facets()[st.facet];
    let (a, nb) = (st.leaf, st.parent);
    let base = build_gate(&boxes[a], &boxes[nb], facet)?;
    let wide = base.widened(&boxes[a], facet);
    let widened = wide.is_some();
    let gate = wide.unwrap_or(base);
    let rest = dec.active_before(s + 1);
    let (m1, m2): (f64, f64) = (0..boxes.len())
        .filter(|&i| rest[i])
        .map(|i| (f1[i].mass(), f2[i].mass()))
        .fold((0.0, 0.0), |acc, m| (acc.0 + m.0, acc.1 + m.1));
    let (i1, i2) = (f1[nb].mass_in(&gate.c1), f2[nb].mass_in(&gate.c1));
    let beta = (m1 - m2 + i2) / i1;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Unsupported(format!(
            "mass deficit {} on the remaining boxes exceeds the gate capacity {i2}",
            m2 - m1
        )));
    }
    let gate_field = f1[nb].restrict(&gate.c1)?.scaled(beta);
    let mut tilde = f2.to_vec();
    tilde[nb] = rasterize(&boxes[nb], &[&gate_field, &f2[nb]])?;
    tilde[a] = f1[a].clone();
    let dev = sup_diff(f1, &tilde, &dec.active_before(s))?;
    ctx.steps.push(StepReport { leaf: a, beta, widened, rebalance_deviation: dev });
    let t1 = d2d_rec(ctx, s + 1, f1, &tilde)?;

    let psi = gate_homeomorphism(&gate);
    let h1 = psi.push_density(&f1[a], &gate_field)?;
    let h2 = psi.push_density(&f2[a], &f2[nb].restrict(&gate.c1)?)?;
    let inner = density_to_density(&h1, &h2, 1.0)?;
    let mut out = ComposedTransport::identity();
    if !t1.stages().is_empty() {
        out.push(Stage::local(LocalStage::new(vec![(active_boxes(dec, s + 1), t1)])));
    }
    if !inner.stages().is_empty() {
        let b = inner.certified_bound();
        let fwd = psi.forward_stage();
        let inv = psi.inverse_stage();
        // On `leaf ∪ C_1` (a box when widened) the conjugate moves points by
        // at most Lip(psi^{-1}) times the inner displacement; otherwise only
        // the triangle inequality through psi applies.
        let bound = if widened { psi.lip_inv * b } else { fwd.bound + b + inv.bound };
        let mut conj = ComposedTransport::from_stages(vec![fwd]);
        conj.extend(inner.stages().iter().cloned());
        conj.push(inv);
        out.push(Stage::local_with_bound(LocalStage::new(vec![(vec![boxes[a].clone(), gate.c1.clone()], conj)]), bound));
    }
    Ok(out)
}

fn fields_of(d: &Density) -> Result<Vec<CellField>> {
    d.fields().map(|f| f.to_vec()).map_err(|_| Error::Unsupported("discretize analytic densities first".into()))
}

/// Caps the certified bound of `t` at the diameter of the domain's
/// bounding box, which every map into the domain satisfies.
fn capped(t: ComposedTransport, domain: &BoxUnionDomain) -> ComposedTransport {
    let diam = domain.diameter_bound();
    if t.certified_bound() <= diam {
        return t;
    }
    ComposedTransport::from_stages(vec![Stage::local_with_bound(LocalStage::new(vec![(domain.boxes().to_vec(), t)]), diam)])
}

/// Transport from `rho1` to `rho2` on a box-union domain by leaf removal
/// with gate rebalancing; a single box delegates to the multiscale scheme.
pub fn wp_density_to_density(rho1: &Density, rho2: &Density, dec: &WpDecomposition) -> Result<WpTransport> {
    let (m1, m2) = (rho1.mass(), rho2.mass());
    if (m1 - m2).abs() > 1e-9 * m1.max(m2) {
        return Err(Error::UnequalMasses(m1, m2));
    }
    let lambda = rho1.lambda().max(rho2.lambda());
    let (f1, f2) = (fields_of(rho1)?, fields_of(rho2)?);
    wp_fields(&f1, &f2, dec, lambda)
}

fn wp_fields(f1: &[CellField], f2: &[CellField], dec: &WpDecomposition, lambda: f64) -> Result<WpTransport> {
    let mut ctx = Ctx { dec, steps: Vec::new() };
    let t = d2d_rec(&mut ctx, 0, f1, f2)?;
    // Outside the band `||rho1 - rho2|| <= 1/(2 lambda)` only the diameter
    // bound is claimed.
    let all = vec![true; f1.len()];
    let delta = sup_diff(f1, f2, &all)?;
    let mean: f64 = f2.iter().map(CellField::mass).sum::<f64>() / dec.domain.volume();
    let fallback = delta > mean / (2.0 * lambda);
    Ok(WpTransport { transport: capped(t, &dec.domain), steps: ctx.steps, fallback })
}

/// Density-to-sample scheme used on single boxes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaseScheme {
    Hall2d { l_cfg: f64 },
    Highd(HighdOptions),
}

#[derive(Clone, Debug)]
pub struct WpEmpirical {
    pub transport: ComposedTransport,
    pub steps: Vec<StepReport>,
    /// Some Hall matching needed a radius above its threshold.
    pub escalated: bool,
    pub fallback: bool,
}

/// `max(max / mean, mean / min)` of a field.
fn field_ratio(f: &CellField) -> f64 {
    let mean = f.mass() / f.bbox().volume();
    (f.max_value() / mean).max(mean / f.min_value())
}

/// Couples `field` (any positive mass) with `pts`, all inside its box.
fn base_coupling(field: &CellField, pts: Vec<Vec<f64>>, scheme: BaseScheme) -> Result<(ComposedTransport, bool)> {
    let unit = field.scaled(1.0 / field.mass());
    let sample = EmpiricalMeasure::from_points(pts)?;
    match scheme {
        BaseScheme::Hall2d { l_cfg } => {
            let part = rectangle_partition_n(&unit, unit.bbox(), sample.n(), field_ratio(&unit).max(1.0))?;
            let h = hall_matching_2d(&sample, &part, l_cfg)?;
            Ok((h.transport, h.escalated))
        }
        BaseScheme::Highd(opts) => Ok((empirical_coupling_highd(&unit, &sample, opts)?.transport, false)),
    }
}

struct EmpCtx<'a> {
    dec: &'a WpDecomposition,
    lambda: f64,
    n: usize,
    scheme: BaseScheme,
    steps: Vec<StepReport>,
    escalated: bool,
    fallback: bool,
}

/// Couples `fields` (mass `|pts| / n` on the boxes active before step `s`)
/// with the points `pts`, given with their box indices.
fn emp_rec(ctx: &mut EmpCtx<'_>, s: usize, fields: &[CellField], pts: Vec<(usize, Vec<f64>)>) -> Result<ComposedTransport> {
    let dec = ctx.dec;
    if s == dec.order.len() {
        let (t, esc) = base_coupling(&fields[dec.root], pts.into_iter().map(|p| p.1).collect(), ctx.scheme)?;
        ctx.escalated |= esc;
        return Ok(t);
    }
    let leaf = dec.order[s].leaf;
    let (inside, outside): (Vec<_>, Vec<_>) = pts.into_iter().partition(|p| p.0 == leaf);
    if inside.is_empty() {
        return Err(Error::Unsupported(format!("no sample point in box {leaf}")));
    }
    let rest = dec.active_before(s + 1);
    let nu_leaf = fields[leaf].mass();
    let nu_rest: f64 = (0..fields.len()).filter(|&i| rest[i]).map(|i| fields[i].mass()).sum();
    let nf = ctx.n as f64;
    let (w_leaf, w_rest) = (inside.len() as f64 / nf / nu_leaf, outside.len() as f64 / nf / nu_rest);
    let tilde: Vec<CellField> = fields
        .iter()
        .enumerate()
        .map(|(i, f)| if i == leaf { f.scaled(w_leaf) } else { f.scaled(w_rest) })
        .collect();
    let mut out = ComposedTransport::identity();
    let mut sub = Ctx { dec, steps: Vec::new() };
    let act = dec.active_before(s);
    let delta = sup_diff(fields, &tilde, &act)?;
    let mean = (inside.len() + outside.len()) as f64 / nf / active_boxes(dec, s).iter().map(Aabb::volume).sum::<f64>();
    ctx.fallback |= delta > mean / (2.0 * ctx.lambda);
    let t1 = d2d_rec(&mut sub, s, fields, &tilde)?;
    ctx.steps.extend(sub.steps);
    if !t1.stages().is_empty() {
        let bound = t1.certified_bound().min(dec.domain.diameter_bound());
        out.push(Stage::local_with_bound(LocalStage::new(vec![(active_boxes(dec, s), t1)]), bound));
    }
    let (tl, esc) = base_coupling(&tilde[leaf], inside.into_iter().map(|p| p.1).collect(), ctx.scheme)?;
    ctx.escalated |= esc;
    let tr = if outside.is_empty() {
        return Err(Error::Unsupported("no sample point in the remaining boxes".into()));
    } else {
        emp_rec(ctx, s + 1, &tilde, outside)?
    };
    let leaf_box = dec.domain.boxes()[leaf].clone();
    out.push(Stage::local(LocalStage::new(vec![(vec![leaf_box], tl), (active_boxes(dec, s + 1), tr)])));
    Ok(out)
}

/// Couples `rho` on a box-union domain with `sample` by rescaling the
/// density on the removed box and on the rest to their empirical masses,
/// moving between the two densities, and recursing.
pub fn wp_empirical(rho: &Density, sample: &EmpiricalMeasure, dec: &WpDecomposition, scheme: BaseScheme) -> Result<WpEmpirical> {
    let fields: Vec<CellField> = fields_of(rho)?.iter().map(|f| f.scaled(1.0 / rho.mass())).collect();
    let mut pts = Vec::with_capacity(sample.n());
    for p in &sample.points {
        let b = dec
            .domain
            .locate(p)
            .ok_or_else(|| Error::Config(format!("sample point {p:?} lies outside the domain")))?;
        pts.push((b, p.clone()));
    }
    let mut ctx = EmpCtx {
        dec,
        lambda: rho.lambda(),
        n: sample.n(),
        scheme,
        steps: Vec::new(),
        escalated: false,
        fallback: false,
    };
    let t = emp_rec(&mut ctx, 0, &fields, pts)?;
    Ok(WpEmpirical { transport: capped(t, &dec.domain), steps: ctx.steps, escalated: ctx.escalated, fallback: ctx.fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{l_shape, ring};
    use crate::pushforward::{pushforward_check, Target};
    use crate::sampling::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn two_cubes() -> BoxUnionDomain {
        BoxUnionDomain::new(vec![Aabb::unit(3), Aabb::new(vec![1.0, 0.0, 0.0], vec![2.0, 1.0, 1.0]).unwrap()]).unwrap()
    }

    fn perturbed(domain: &BoxUnionDomain, rng: &mut ChaCha20Rng, eps: f64) -> Density {
        let fields = domain
            .boxes()
            .iter()
            .map(|b| {
                let vals = (0..16).map(|_| 1.0 + eps * (2.0 * rng.gen::<f64>() - 1.0)).collect();
                CellField::uniform_grid(b.clone(), &[4, 4], vals).unwrap()
            })
            .collect();
        Density::from_fields(domain.clone(), fields, 4.0).unwrap()
    }

    #[test]
    fn single_box_has_no_removals() {
        let dec = build_wp(&BoxUnionDomain::unit(2)).unwrap();
        assert!(dec.order.is_empty());
        assert!(dec.connectivity_preserved());
    }

    #[test]
    fn l_shape_removes_the_upper_box() {
        let dec = build_wp(&l_shape()).unwrap();
        assert_eq!(dec.root, 0);
        assert_eq!(dec.order, vec![RemovalStep { leaf: 1, parent: 0, facet: dec.order[0].facet }]);
        assert!(dec.connectivity_preserved());
    }

    #[test]
    fn ring_keeps_connectivity_at_every_step() {
        let dec = build_wp(&ring()).unwrap();
        assert_eq!(dec.order.len(), 7);
        for s in 0..=dec.order.len() {
            assert_eq!(dec.domain.components(&dec.active_before(s)).len(), 1, "step {s}");
        }
        let export = dec.export().unwrap();
        assert_eq!(export.gates.len(), 7);
    }

    #[test]
    fn disconnected_domain_is_rejected() {
        let err = BoxUnionDomain::new(vec![Aabb::unit(2), Aabb::new(vec![2.0, 0.0], vec![3.0, 1.0]).unwrap()]);
        assert!(matches!(err, Err(Error::Disconnected(_))));
    }

    #[test]
    fn gate_between_unit_cubes() {
        let dom = two_cubes();
        let f = &dom.facets()[0];
        let g = build_gate(&dom.boxes()[0], &dom.boxes()[1], f).unwrap();
        assert_eq!(g.r, 0.5);
        assert_eq!(g.sign, 1.0);
        assert_eq!(g.c1, Aabb::closed(vec![1.0, 0.25, 0.25], vec![1.5, 0.75, 0.75]));
        assert_eq!(g.c_minus1, Aabb::closed(vec![0.5, 0.25, 0.25], vec![1.0, 0.75, 0.75]));
        assert_eq!(g.c_minus_half, Aabb::closed(vec![0.75, 0.25, 0.25], vec![1.0, 0.75, 0.75]));
        let w = g.widened(&dom.boxes()[0], f).unwrap();
        assert_eq!(w.c1, Aabb::closed(vec![1.0, 0.0, 0.0], vec![1.5, 1.0, 1.0]));
    }

    #[test]
    fn sliver_facet_sets_radius() {
        let a = Aabb::unit(2);
        let b = Aabb::new(vec![1.0, 0.99], vec![2.0, 2.0]).unwrap();
        let dom = BoxUnionDomain::new(vec![a.clone(), b.clone()]).unwrap();
        let g = build_gate(&b, &a, &dom.facets()[0]).unwrap();
        assert!((g.r - 0.005).abs() < 1e-12);
        assert_eq!(g.sign, -1.0);
    }

    #[test]
    fn gate_map_anchors_and_round_trip() {
        let dom = two_cubes();
        let g = build_gate(&dom.boxes()[0], &dom.boxes()[1], &dom.facets()[0]).unwrap();
        let psi = gate_homeomorphism(&g);
        assert_eq!(psi.apply(&[0.2, 0.5, 0.5]), vec![0.2, 0.5, 0.5]);
        assert_eq!(psi.apply(&[0.7, 0.1, 0.5]), vec![0.7, 0.1, 0.5]);
        for i in 0..=10 {
            for j in 0..=10 {
                let (u, v) = (0.25 + 0.05 * i as f64, 0.25 + 0.05 * j as f64);
                assert_eq!(psi.apply(&[1.5, u, v]), vec![1.0, u, v]);
                assert_eq!(psi.apply(&[1.0, u, v]), vec![0.75, u, v]);
                assert_eq!(psi.apply(&[0.5, u, v]), vec![0.5, u, v]);
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x: Vec<f64> = vec![rng.gen::<f64>(), rng.gen(), rng.gen()];
            let back = psi.apply(&psi.apply_inverse(&x));
            assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
        assert_eq!(psi.lip, 1.0);
        assert_eq!(psi.lip_inv, 2.0);
    }

    #[test]
    fn equal_densities_give_identity() {
        let dom = l_shape();
        let rho = Density::uniform(dom.clone(), 2.0).unwrap();
        let dec = build_wp(&dom).unwrap();
        let t = wp_density_to_density(&rho, &rho, &dec).unwrap();
        assert_eq!(t.transport.certified_bound(), 0.0);
        assert!((t.steps[0].beta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_box_delegates() {
        let dom = BoxUnionDomain::unit(2);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (r1, r2) = (perturbed(&dom, &mut rng, 0.05), perturbed(&dom, &mut rng, 0.05));
        let dec = build_wp(&dom).unwrap();
        let t = wp_density_to_density(&r1, &r2, &dec).unwrap();
        let direct = density_to_density(&r1.fields().unwrap()[0], &r2.fields().unwrap()[0], 1.0).unwrap();
        assert_eq!(t.transport.certified_bound(), direct.certified_bound());
    }

    #[test]
    fn l_shape_perturbations_balance_with_stable_constant() {
        let dom = l_shape();
        let dec = build_wp(&dom).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut ratios = Vec::new();
        for _ in 0..50 {
            let r1 = perturbed(&dom, &mut rng, 0.025);
            let r2 = perturbed(&dom, &mut rng, 0.025);
            let delta: f64 = r1.fields().unwrap().iter().zip(r2.fields().unwrap()).map(|(a, b)| a.sup_abs_diff(b).unwrap()).fold(0.0, f64::max);
            let t = wp_density_to_density(&r1, &r2, &dec).unwrap();
            assert!(!t.fallback);
            let ledger = pushforward_check(&t.transport, &r1, Target::Density(&r2), dom.boxes()).unwrap();
            assert!(ledger.max_abs_error() < 1e-9, "{}", ledger.max_abs_error());
            assert!(!ledger.flagged());
            ratios.push(t.transport.certified_bound() / delta);
        }
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
        assert!(hi / lo < 5.0, "{lo} {hi}");
    }

    #[test]
    fn conjugated_displacement_within_certified_bound() {
        let dom = l_shape();
        let dec = build_wp(&dom).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let (r1, r2) = (perturbed(&dom, &mut rng, 0.05), perturbed(&dom, &mut rng, 0.05));
        let t = wp_density_to_density(&r1, &r2, &dec).unwrap();
        assert!(t.steps[0].widened);
        let b = t.transport.certified_bound();
        let pts = sample(&r1, 5000, 3).unwrap();
        for p in &pts.points {
            assert!(t.transport.displacement(p) <= b + 1e-12);
        }
    }

    #[test]
    fn rebalanced_density_keeps_masses() {
        let dom = ring();
        let dec = build_wp(&dom).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let r1 = perturbed(&dom, &mut rng, 0.02);
        let r2 = perturbed(&dom, &mut rng, 0.02);
        let t = wp_density_to_density(&r1, &r2, &dec).unwrap();
        assert_eq!(t.steps.len(), 7);
        let probes: Vec<Aabb> = dom.boxes().to_vec();
        let ledger = pushforward_check(&t.transport, &r1, Target::Density(&r2), &probes).unwrap();
        assert!(ledger.max_abs_error() < 1e-9);
    }

    #[test]
    fn empirical_on_l_shape_hits_every_atom() {
        let dom = l_shape();
        let dec = build_wp(&dom).unwrap();
        let rho = Density::uniform(dom.clone(), 2.0).unwrap();
        let s = sample(&rho, 300, 4).unwrap();
        let e = wp_empirical(&rho, &s, &dec, BaseScheme::Hall2d { l_cfg: 1.0 }).unwrap();
        let probes: Vec<Aabb> = s.points.iter().map(|p| Aabb::closed(p.clone(), p.clone())).collect();
        let ledger = pushforward_check(&e.transport, &rho, Target::Empirical(&s), &probes).unwrap();
        assert!(ledger.max_abs_error() < 1e-9, "{}", ledger.max_abs_error());
        assert!(e.transport.certified_bound() < dom.diameter_bound());
    }
}
