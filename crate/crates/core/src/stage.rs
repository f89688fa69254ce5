//! Composed transport maps built from a few kinds of stages.
//!
//! A [`ComposedTransport`] is an ordered list of stages, each with its own
//! certified sup-displacement. Points are routed lazily through the stages,
//! and piecewise-uniform measures can be pushed forward exactly as lists of
//! [`Frag`]ments.

use serde::{Deserialize, Serialize};

use crate::field::CellField;
use crate::geometry::{distance, Aabb, BoxIndex};
use crate::transport1d::MonotoneMap1D;

/// Mass spread uniformly over a (possibly degenerate) box.
#[derive(Clone, Debug, PartialEq)]
pub struct Frag {
    pub bx: Aabb,
    pub mass: f64,
}

impl Frag {
    /// Fraction of this fragment lying in the closed box `q`.
    pub fn fraction_in(&self, q: &Aabb) -> f64 {
        let mut w = 1.0;
        for a in 0..self.bx.dim() {
            let (lo, hi) = (self.bx.lo[a], self.bx.hi[a]);
            if hi > lo {
                let len = hi.min(q.hi[a]) - lo.max(q.lo[a]);
                if len <= 0.0 {
                    return 0.0;
                }
                w *= len / (hi - lo);
            } else if lo < q.lo[a] || lo > q.hi[a] {
                return 0.0;
            }
        }
        w
    }
}

/// Piecewise-uniform fragments of a set of per-box fields.
pub fn fragments_of(fields: &[CellField]) -> Vec<Frag> {
    fields
        .iter()
        .flat_map(|f| f.cells().map(|(bx, v)| Frag { mass: v * bx.volume(), bx }))
        .filter(|f| f.mass > 0.0)
        .collect()
}

/// Splits `frag` among `cells` (looked up through `index`). Returns
/// `(cell, sub-box, weight)` triples and the `(box, weight)` pieces of the
/// fragment left outside every cell. Weights on shared faces are shared
/// proportionally.
fn distribute(frag: &Frag, cells: &[Aabb], index: &BoxIndex) -> (Vec<(usize, Aabb, f64)>, Vec<(Aabb, f64)>) {
    let mut out = Vec::new();
    let mut total = 0.0;
    let touching = index.touching(cells, &frag.bx);
    for &c in &touching {
        let w = Frag { bx: frag.bx.clone(), mass: 1.0 }.fraction_in(&cells[c]);
        if w > 0.0 {
            if let Some(sub) = frag.bx.intersection(&cells[c]) {
                out.push((c, sub, w));
                total += w;
            }
        }
    }
    if total >= 1.0 - 1e-9 {
        for t in &mut out {
            t.2 /= total;
        }
        return (out, Vec::new());
    }
    let vol = frag.bx.volume();
    if out.is_empty() || !(vol > 0.0) {
        return (out, vec![(frag.bx.clone(), 1.0 - total)]);
    }
    // Cut the uncovered part into boxes so the leftover mass stays where it
    // was instead of being smeared over the whole fragment.
    let mut pieces = vec![frag.bx.clone()];
    for &c in &touching {
        pieces = pieces.into_iter().flat_map(|p| p.difference(&cells[c])).collect();
    }
    let rest: Vec<(Aabb, f64)> = pieces
        .into_iter()
        .map(|p| {
            let w = p.volume() / vol;
            (p, w)
        })
        .filter(|(_, w)| *w > 0.0)
        .collect();
    (out, rest)
}

fn push_rest(out: &mut Vec<Frag>, rest: Vec<(Aabb, f64)>, mass: f64) {
    out.extend(rest.into_iter().map(|(bx, w)| Frag { bx, mass: mass * w }));
}

/// Per-cell one-dimensional maps acting on one axis each.
#[derive(Clone, Debug)]
pub struct AxisStage {
    cells: Vec<Aabb>,
    axes: Vec<usize>,
    maps: Vec<MonotoneMap1D>,
    index: BoxIndex,
}

impl AxisStage {
    pub fn new(entries: Vec<(Aabb, usize, MonotoneMap1D)>) -> Self {
        let mut cells = Vec::with_capacity(entries.len());
        let mut axes = Vec::with_capacity(entries.len());
        let mut maps = Vec::with_capacity(entries.len());
        for (c, a, m) in entries {
            cells.push(c);
            axes.push(a);
            maps.push(m);
        }
        let index = BoxIndex::new(&cells);
        Self { cells, axes, maps, index }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Exact sup-displacement of the stage.
    pub fn sup_displacement(&self) -> f64 {
        self.maps.iter().map(MonotoneMap1D::sup_displacement).fold(0.0, f64::max)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self.index.locate(&self.cells, x) {
            Some(c) => {
                let mut y = x.to_vec();
                y[self.axes[c]] = self.maps[c].eval(x[self.axes[c]]);
                y
            }
            None => x.to_vec(),
        }
    }

    fn push(&self, frags: Vec<Frag>) -> Vec<Frag> {
        let mut out = Vec::with_capacity(frags.len());
        for f in frags {
            let (parts, rest) = distribute(&f, &self.cells, &self.index);
            push_rest(&mut out, rest, f.mass);
            for (c, sub, w) in parts {
                let a = self.axes[c];
                for (y0, y1, frac) in self.maps[c].push_interval(sub.lo[a], sub.hi[a]) {
                    out.push(Frag { bx: sub.with_axis(a, y0, y1), mass: f.mass * w * frac });
                }
            }
        }
        out
    }

    /// Pushes `(source, current)` box pairs on which the composed map so far
    /// is a diagonal increasing affine map.
    fn track(&self, items: Vec<(Aabb, Aabb)>) -> Vec<(Aabb, Aabb)> {
        let mut out = Vec::new();
        for (src, cur) in items {
            let probe = Frag { bx: cur.clone(), mass: 1.0 };
            let (parts, rest) = distribute(&probe, &self.cells, &self.index);
            if parts.is_empty() {
                out.push((src.clone(), cur.clone()));
            }
            for (piece, _) in rest {
                out.push((pull_back(&src, &cur, &piece), piece));
            }
            for (c, sub, _) in parts {
                let a = self.axes[c];
                let s = pull_back(&src, &cur, &sub);
                for p in self.maps[c].pieces() {
                    let (lo, hi) = (sub.lo[a].max(p.x0), sub.hi[a].min(p.x1));
                    if hi < lo || (hi == lo && sub.hi[a] > sub.lo[a]) {
                        continue;
                    }
                    let piece_cur = sub.with_axis(a, lo, hi);
                    let piece_src = pull_back(&s, &sub, &piece_cur);
                    let (y0, y1) = (p.eval(lo), p.eval(hi));
                    out.push((piece_src, sub.with_axis(a, y0.min(y1), y0.max(y1))));
                    if sub.hi[a] == sub.lo[a] {
                        break;
                    }
                }
            }
        }
        out
    }
}

/// Preimage of `sub ⊂ cur` under the diagonal affine map `src -> cur`.
fn pull_back(src: &Aabb, cur: &Aabb, sub: &Aabb) -> Aabb {
    let d = src.dim();
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for a in 0..d {
        let (c0, c1) = (cur.lo[a], cur.hi[a]);
        if c1 > c0 {
            let t0 = (sub.lo[a] - c0) / (c1 - c0);
            let t1 = (sub.hi[a] - c0) / (c1 - c0);
            lo.push(src.lo[a] + t0 * src.side(a));
            hi.push(src.lo[a] + t1 * src.side(a));
        } else {
            lo.push(src.lo[a]);
            hi.push(src.hi[a]);
        }
    }
    Aabb::closed(lo, hi)
}

/// Keeps a piecewise-constant fraction of the mass in place and sends the
/// rest through `moved`.
#[derive(Clone, Debug)]
pub struct MixtureStage {
    keep: CellField,
    cells: Vec<Aabb>,
    index: BoxIndex,
    moved: Box<ComposedTransport>,
}

impl MixtureStage {
    pub fn new(keep: CellField, moved: ComposedTransport) -> Self {
        let cells: Vec<Aabb> = keep.cells().map(|(b, _)| b).collect();
        let index = BoxIndex::new(&cells);
        Self { keep, cells, index, moved: Box::new(moved) }
    }

    pub fn moved(&self) -> &ComposedTransport {
        &self.moved
    }
}

/// Independent transports on disjoint regions; identity elsewhere.
#[derive(Clone, Debug)]
pub struct LocalStage {
    boxes: Vec<Aabb>,
    owner: Vec<usize>,
    index: BoxIndex,
    transports: Vec<ComposedTransport>,
}

impl LocalStage {
    pub fn new(regions: Vec<(Vec<Aabb>, ComposedTransport)>) -> Self {
        let mut boxes = Vec::new();
        let mut owner = Vec::new();
        let mut transports = Vec::new();
        for (r, (bs, t)) in regions.into_iter().enumerate() {
            for b in bs {
                boxes.push(b);
                owner.push(r);
            }
            transports.push(t);
        }
        let index = BoxIndex::new(&boxes);
        Self { boxes, owner, index, transports }
    }

    pub fn transports(&self) -> &[ComposedTransport] {
        &self.transports
    }
}

/// Sends every cell to one atom.
#[derive(Clone, Debug)]
pub struct AtomStage {
    cells: Vec<Aabb>,
    atoms: Vec<Vec<f64>>,
    index: BoxIndex,
}

impl AtomStage {
    pub fn new(cells: Vec<Aabb>, atoms: Vec<Vec<f64>>) -> Self {
        let index = BoxIndex::new(&cells);
        Self { cells, atoms, index }
    }

    /// Exact sup over cells of the farthest distance to the assigned atom.
    pub fn sup_displacement(&self) -> f64 {
        self.cells
            .iter()
            .zip(&self.atoms)
            .map(|(c, a)| c.farthest_distance(a))
            .fold(0.0, f64::max)
    }

    pub fn cells(&self) -> &[Aabb] {
        &self.cells
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }
}

#[derive(Clone, Debug)]
pub enum StageKind {
    Axis(AxisStage),
    Mixture(MixtureStage),
    Local(LocalStage),
    Atoms(AtomStage),
}

/// A stage and its certified sup-displacement.
#[derive(Clone, Debug)]
pub struct Stage {
    pub kind: StageKind,
    pub bound: f64,
    /// Dyadic level this stage realizes, if any.
    pub level: Option<u32>,
    /// Whether this is a terminal (last-resolution) stage.
    pub terminal: bool,
}

impl Stage {
    pub fn axis(stage: AxisStage, bound: f64) -> Self {
        Self { kind: StageKind::Axis(stage), bound, level: None, terminal: false }
    }

    pub fn atoms(stage: AtomStage) -> Self {
        let bound = stage.sup_displacement();
        Self { kind: StageKind::Atoms(stage), bound, level: None, terminal: true }
    }

    pub fn mixture(stage: MixtureStage) -> Self {
        let bound = stage.moved.certified_bound();
        Self { kind: StageKind::Mixture(stage), bound, level: None, terminal: false }
    }

    pub fn local(stage: LocalStage) -> Self {
        let bound = stage.transports.iter().map(|t| t.certified_bound()).fold(0.0, f64::max);
        Self { kind: StageKind::Local(stage), bound, level: None, terminal: false }
    }

    /// A local stage whose bound is known more tightly than the per-region
    /// certified bounds, e.g. from exact tracking.
    pub fn local_with_bound(stage: LocalStage, bound: f64) -> Self {
        Self { kind: StageKind::Local(stage), bound, level: None, terminal: false }
    }

    pub fn at_level(mut self, k: u32) -> Self {
        self.level = Some(k);
        self
    }

    pub fn as_terminal(mut self) -> Self {
        self.terminal = true;
        self
    }

    fn images(&self, x: Vec<f64>, out: &mut Vec<Vec<f64>>) {
        match &self.kind {
            StageKind::Axis(s) => out.push(s.apply(&x)),
            StageKind::Atoms(s) => match s.index.locate(&s.cells, &x) {
                Some(c) => out.push(s.atoms[c].clone()),
                None => out.push(x),
            },
            StageKind::Local(s) => match s.index.locate(&s.boxes, &x) {
                Some(b) => out.extend(s.transports[s.owner[b]].images(&x)),
                None => out.push(x),
            },
            StageKind::Mixture(s) => {
                if !s.keep.bbox().contains(&x) {
                    out.push(x);
                    return;
                }
                let k = s.keep.eval(&x);
                if k < 1.0 {
                    out.extend(s.moved.images(&x));
                }
                if k > 0.0 {
                    out.push(x);
                }
            }
        }
    }

    fn push(&self, frags: Vec<Frag>) -> Vec<Frag> {
        match &self.kind {
            StageKind::Axis(s) => s.push(frags),
            StageKind::Atoms(s) => {
                let mut out = Vec::with_capacity(frags.len());
                for f in frags {
                    let (parts, rest) = distribute(&f, &s.cells, &s.index);
                    push_rest(&mut out, rest, f.mass);
                    for (c, _, w) in parts {
                        let p = s.atoms[c].clone();
                        out.push(Frag { bx: Aabb::closed(p.clone(), p), mass: f.mass * w });
                    }
                }
                out
            }
            StageKind::Local(s) => {
                let mut buckets: Vec<Vec<Frag>> = vec![Vec::new(); s.transports.len()];
                let mut out = Vec::new();
                for f in frags {
                    let (parts, rest) = distribute(&f, &s.boxes, &s.index);
                    push_rest(&mut out, rest, f.mass);
                    for (b, sub, w) in parts {
                        buckets[s.owner[b]].push(Frag { bx: sub, mass: f.mass * w });
                    }
                }
                for (t, bucket) in s.transports.iter().zip(buckets) {
                    if !bucket.is_empty() {
                        out.extend(t.pushforward(bucket));
                    }
                }
                out
            }
            StageKind::Mixture(s) => {
                let mut kept = Vec::new();
                let mut moving = Vec::new();
                for f in frags {
                    let (parts, rest) = distribute(&f, &s.cells, &s.index);
                    push_rest(&mut kept, rest, f.mass);
                    for (c, sub, w) in parts {
                        let k = s.keep.values()[c];
                        if k > 0.0 {
                            kept.push(Frag { bx: sub.clone(), mass: f.mass * w * k });
                        }
                        if k < 1.0 {
                            moving.push(Frag { bx: sub, mass: f.mass * w * (1.0 - k) });
                        }
                    }
                }
                kept.extend(s.moved.pushforward(moving));
                kept
            }
        }
    }
}

/// Ordered composition of stages with a certified sup-displacement.
#[derive(Clone, Debug, Default)]
pub struct ComposedTransport {
    stages: Vec<Stage>,
}

/// Per-level and total bounds of a transport.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportSummary {
    pub levels: Vec<LevelSummary>,
    pub terminal_bound: f64,
    pub certified_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub k: u32,
    pub max_displacement: f64,
}

impl ComposedTransport {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_stages(stages: Vec<Stage>) -> Self {
        Self { stages }
    }

    pub fn push(&mut self, stage: Stage) {
        self.stages.push(stage);
    }

    /// `self` followed by `next`.
    pub fn then(mut self, next: ComposedTransport) -> Self {
        self.stages.extend(next.stages);
        self
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Sum of the stage bounds (triangle inequality along the chain).
    pub fn certified_bound(&self) -> f64 {
        self.stages.iter().map(|s| s.bound).sum()
    }

    /// All images of `x`; more than one only where a mixture splits mass.
    pub fn images(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut cur = vec![x.to_vec()];
        for s in &self.stages {
            let mut next = Vec::with_capacity(cur.len());
            for y in cur {
                s.images(y, &mut next);
            }
            cur = next;
        }
        cur
    }

    /// Largest distance from `x` to one of its images.
    pub fn displacement(&self, x: &[f64]) -> f64 {
        self.images(x).iter().map(|y| distance(x, y)).fold(0.0, f64::max)
    }

    /// Exact pushforward of a piecewise-uniform measure.
    pub fn pushforward(&self, mut frags: Vec<Frag>) -> Vec<Frag> {
        for s in &self.stages {
            frags = s.push(frags);
        }
        frags
    }

    /// Exact sup-displacement over `sources` when every stage is an
    /// [`AxisStage`]; `None` otherwise.
    pub fn exact_axis_sup(&self, sources: &[Aabb]) -> Option<f64> {
        let mut items: Vec<(Aabb, Aabb)> = sources.iter().map(|b| (b.clone(), b.clone())).collect();
        for s in &self.stages {
            match &s.kind {
                StageKind::Axis(a) => items = a.track(items),
                _ => return None,
            }
        }
        Some(
            items
                .iter()
                .map(|(src, cur)| {
                    (0..src.dim())
                        .map(|a| {
                            let d = (cur.lo[a] - src.lo[a]).abs().max((cur.hi[a] - src.hi[a]).abs());
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max),
        )
    }

    pub fn summary(&self) -> TransportSummary {
        let mut levels: Vec<LevelSummary> = Vec::new();
        let mut terminal = 0.0;
        for s in &self.stages {
            if let Some(k) = s.level {
                match levels.iter_mut().find(|l| l.k == k) {
                    Some(l) => l.max_displacement = l.max_displacement.max(s.bound),
                    None => levels.push(LevelSummary { k, max_displacement: s.bound }),
                }
            }
            if s.terminal {
                terminal += s.bound;
            }
        }
        levels.sort_by_key(|l| l.k);
        TransportSummary { levels, terminal_bound: terminal, certified_bound: self.certified_bound() }
    }
}

impl Extend<Stage> for ComposedTransport {
    fn extend<I: IntoIterator<Item = Stage>>(&mut self, iter: I) {
        self.stages.extend(iter);
    }
}

/// Total mass of `frags` inside the closed box `q`.
pub fn mass_in(frags: &[Frag], q: &Aabb) -> f64 {
    frags.iter().map(|f| f.mass * f.fraction_in(q)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport1d::{cdf_transport, PiecewiseConstantDensity1D};

    fn lemma_stage() -> AxisStage {
        let src = PiecewiseConstantDensity1D::uniform(0.0, 1.0, 1.0).unwrap();
        let tgt = PiecewiseConstantDensity1D::two_valued(0.0, 1.0, 1.5, 0.5).unwrap();
        AxisStage::new(vec![(Aabb::unit(2), 0, cdf_transport(&src, &tgt).unwrap())])
    }

    #[test]
    fn axis_stage_pushes_lebesgue_to_two_valued() {
        let s = lemma_stage();
        let t = ComposedTransport::from_stages(vec![Stage::axis(s.clone(), s.sup_displacement())]);
        let out = t.pushforward(vec![Frag { bx: Aabb::unit(2), mass: 1.0 }]);
        let left = Aabb::new(vec![0.0, 0.0], vec![0.5, 1.0]).unwrap();
        assert!((mass_in(&out, &left) - 0.75).abs() < 1e-15);
        assert!((t.certified_bound() - 0.25).abs() < 1e-15);
        assert!((t.exact_axis_sup(&[Aabb::unit(2)]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn atoms_collect_all_mass() {
        let a = AtomStage::new(vec![Aabb::unit(2)], vec![vec![0.2, 0.9]]);
        let t = ComposedTransport::from_stages(vec![Stage::atoms(a)]);
        let out = t.pushforward(vec![Frag { bx: Aabb::unit(2), mass: 1.0 }]);
        let probe = Aabb::new(vec![0.1, 0.8], vec![0.3, 1.0]).unwrap();
        assert_eq!(mass_in(&out, &probe), 1.0);
        assert_eq!(t.certified_bound(), Aabb::unit(2).farthest_distance(&[0.2, 0.9]));
    }

    #[test]
    fn identity_preserves_everything() {
        let frags = vec![Frag { bx: Aabb::unit(2), mass: 1.0 }];
        let out = ComposedTransport::identity().pushforward(frags.clone());
        assert_eq!(out, frags);
    }

    #[test]
    fn mixture_splits_mass() {
        let keep = CellField::uniform_grid(Aabb::unit(1), &[2], vec![1.0, 0.5]).unwrap();
        let moved = ComposedTransport::from_stages(vec![Stage::atoms(AtomStage::new(
            vec![Aabb::unit(1)],
            vec![vec![0.0]],
        ))]);
        let t = ComposedTransport::from_stages(vec![Stage::mixture(MixtureStage::new(keep, moved))]);
        let out = t.pushforward(vec![Frag { bx: Aabb::unit(1), mass: 1.0 }]);
        let origin = Aabb::closed(vec![0.0], vec![0.0]);
        assert!((mass_in(&out, &origin) - 0.25).abs() < 1e-15);
        assert_eq!(t.images(&[0.75]).len(), 2);
        assert_eq!(t.displacement(&[0.75]), 0.75);
    }
}
