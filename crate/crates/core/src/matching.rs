//! Exact bottleneck matching and the rectangle-to-sample Hall matching.
//!
//! Feasibility at a radius `r` is decided by Hopcroft-Karp on the graph of
//! pairs with cost `<= r`; candidate edges come from a uniform grid over
//! the right points. The optimum is found by exponential search for a
//! feasible radius followed by binary search over the sorted distinct
//! costs below it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::geometry::{distance, Aabb};
use crate::partition::RectanglePartition;
use crate::sampling::EmpiricalMeasure;
use crate::stage::{AtomStage, ComposedTransport, Stage};

const NONE: usize = usize::MAX;

/// Left side of a bipartite instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Left {
    Points(Vec<Vec<f64>>),
    /// Boxes with cost `dist(y, Q)` to a right point `y`.
    Boxes(Vec<Aabb>),
    /// Boxes with cost `max_{x in Q} |x - y|`, the displacement of sending
    /// all of `Q` to `y`.
    BoxesFar(Vec<Aabb>),
}

/// Equal-cardinality instance with implicit Euclidean costs.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteInstance {
    pub left: Left,
    pub right: Vec<Vec<f64>>,
}

impl BipartiteInstance {
    pub fn points(left: Vec<Vec<f64>>, right: Vec<Vec<f64>>) -> Self {
        Self { left: Left::Points(left), right }
    }

    pub fn n(&self) -> usize {
        self.right.len()
    }

    fn left_len(&self) -> usize {
        match &self.left {
            Left::Points(p) => p.len(),
            Left::Boxes(b) | Left::BoxesFar(b) => b.len(),
        }
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        let y = &self.right[j];
        match &self.left {
            Left::Points(p) => distance(&p[i], y),
            Left::Boxes(b) => b[i].distance_to(y),
            Left::BoxesFar(b) => b[i].farthest_distance(y),
        }
    }

    /// Box around left item `i` containing every right point within `r`.
    fn reach(&self, i: usize, r: f64) -> Aabb {
        match &self.left {
            Left::Points(p) => Aabb::closed(p[i].clone(), p[i].clone()).enlarged(r),
            // The farthest distance dominates the distance to the box.
            Left::Boxes(b) | Left::BoxesFar(b) => b[i].enlarged(r),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::Config("matching needs at least one point".into()));
        }
        if self.left_len() != self.n() {
            return Err(Error::Config(format!(
                "unequal sides: {} left, {} right",
                self.left_len(),
                self.n()
            )));
        }
        Ok(())
    }
}

/// A bijection `perm[i] = j` and its bottleneck cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    pub perm: Vec<usize>,
    pub bottleneck_radius: f64,
    pub feasible: bool,
    /// Hall violation at the largest radius below the optimum, when the
    /// optimum is positive.
    pub certificate: Option<HallViolation>,
}

impl MatchingResult {
    /// CSV rows `i,j,distance`.
    pub fn write_csv(&self, inst: &BipartiteInstance, mut w: impl Write) -> Result<()> {
        writeln!(w, "i,j,distance")?;
        for (i, &j) in self.perm.iter().enumerate() {
            writeln!(w, "{i},{j},{:?}", inst.cost(i, j))?;
        }
        Ok(())
    }
}

/// Left set `left` whose neighbourhood `neighbors` is strictly smaller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallViolation {
    pub radius: f64,
    pub left: Vec<usize>,
    pub neighbors: Vec<usize>,
}

/// Uniform bucket grid over the right points.
struct Grid {
    lo: Vec<f64>,
    h: f64,
    dims: Vec<usize>,
    start: Vec<usize>,
    items: Vec<u32>,
}

impl Grid {
    fn new(points: &[Vec<f64>]) -> Self {
        let d = points[0].len();
        let mut lo = points[0].clone();
        let mut hi = points[0].clone();
        for p in points {
            for a in 0..d {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext: Vec<f64> = (0..d).map(|a| hi[a] - lo[a]).collect();
        let span = ext.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let vol: f64 = ext.iter().map(|e| e.max(span * 1e-3)).product();
        let h = (vol / points.len() as f64).powf(1.0 / d as f64).max(span * 1e-6);
        let dims: Vec<usize> = ext.iter().map(|e| ((e / h).floor() as usize + 1).min(1 << 20)).collect();
        let total: usize = dims.iter().product();
        let mut counts = vec![0usize; total + 1];
        let mut grid = Self { lo, h, dims, start: Vec::new(), items: Vec::new() };
        let cells: Vec<usize> = points.iter().map(|p| grid.cell_of(p)).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for c in 0..total {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; points.len()];
        for (j, &c) in cells.iter().enumerate() {
            items[fill[c]] = j as u32;
            fill[c] += 1;
        }
        grid.start = counts;
        grid.items = items;
        grid
    }

    fn coord(&self, a: usize, x: f64) -> usize {
        let t = ((x - self.lo[a]) / self.h).floor();
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(self.dims[a] - 1)
        }
    }

    fn cell_of(&self, p: &[f64]) -> usize {
        let mut c = 0;
        for a in 0..self.dims.len() {
            c = c * self.dims[a] + self.coord(a, p[a]);
        }
        c
    }

    /// Calls `f(j)` for every point in cells meeting `q`.
    fn for_each_in(&self, q: &Aabb, mut f: impl FnMut(usize)) {
        let d = self.dims.len();
        let lo: Vec<usize> = (0..d).map(|a| self.coord(a, q.lo[a])).collect();
        let hi: Vec<usize> = (0..d).map(|a| self.coord(a, q.hi[a])).collect();
        let mut pos = lo.clone();
        loop {
            let mut c = 0;
            for a in 0..d {
                c = c * self.dims[a] + pos[a];
            }
            for &j in &self.items[self.start[c]..self.start[c + 1]] {
                f(j as usize);
            }
            let mut a = d;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                if pos[a] < hi[a] {
                    pos[a] += 1;
                    break;
                }
                pos[a] = lo[a];
            }
        }
    }
}

/// Adjacency lists in compressed form, each row sorted by cost.
struct Graph {
    start: Vec<usize>,
    adj: Vec<u32>,
    cost: Vec<f64>,
}

impl Graph {
    /// Rows cut to the pairs of cost `<= r`.
    fn restrict(&self, r: f64) -> Csr<'_> {
        let end = (0..self.start.len() - 1)
            .map(|u| self.start[u] + self.cost[self.start[u]..self.start[u + 1]].partition_point(|&c| c <= r))
            .collect();
        Csr { start: &self.start, end, adj: &self.adj }
    }
}

/// A view of a `Graph` with truncated rows.
struct Csr<'a> {
    start: &'a [usize],
    end: Vec<usize>,
    adj: &'a [u32],
}

impl Csr<'_> {
    fn neighbors(&self, u: usize) -> &[u32] {
        &self.adj[self.start[u]..self.end[u]]
    }
}

/// Pairs with cost `<= r`.
fn edges(inst: &BipartiteInstance, grid: &Grid, r: f64) -> Graph {
    let n = inst.n();
    let mut start = Vec::with_capacity(n + 1);
    let mut adj = Vec::new();
    let mut cost = Vec::new();
    let mut row: Vec<(f64, u32)> = Vec::new();
    start.push(0);
    for i in 0..n {
        let q = inst.reach(i, r);
        row.clear();
        grid.for_each_in(&q, |j| {
            let c = inst.cost(i, j);
            if c <= r {
                row.push((c, j as u32));
            }
        });
        row.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        adj.extend(row.iter().map(|e| e.1));
        cost.extend(row.iter().map(|e| e.0));
        start.push(adj.len());
    }
    Graph { start, adj, cost }
}

/// Grows `ml`/`mr` to a maximum matching of `g` (Hopcroft-Karp with an
/// explicit DFS stack).
fn max_matching(g: &Csr, ml: &mut [usize], mr: &mut [usize]) {
    const INF: u32 = u32::MAX;
    let n = ml.len();
    let mut dist = vec![INF; n];
    let mut queue = Vec::with_capacity(n);
    let mut it = vec![0usize; n];
    let mut stack: Vec<usize> = Vec::new();
    loop {
        queue.clear();
        for u in 0..n {
            if ml[u] == NONE {
                dist[u] = 0;
                queue.push(u);
            } else {
                dist[u] = INF;
            }
        }
        let mut found = false;
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            for &v in g.neighbors(u) {
                let w = mr[v as usize];
                if w == NONE {
                    found = true;
                } else if dist[w] == INF {
                    dist[w] = dist[u] + 1;
                    queue.push(w);
                }
            }
        }
        if !found {
            return;
        }
        it.copy_from_slice(&g.start[..n]);
        for root in 0..n {
            if ml[root] != NONE {
                continue;
            }
            stack.clear();
            stack.push(root);
            while let Some(&u) = stack.last() {
                if it[u] == g.end[u] {
                    dist[u] = INF;
                    stack.pop();
                    continue;
                }
                let v = g.adj[it[u]] as usize;
                it[u] += 1;
                let w = mr[v];
                if w == NONE {
                    for &x in &stack {
                        let vx = g.adj[it[x] - 1] as usize;
                        ml[x] = vx;
                        mr[vx] = x;
                    }
                    break;
                } else if dist[w] != INF && dist[w] == dist[u] + 1 {
                    stack.push(w);
                }
            }
        }
    }
}

/// Left vertices reachable from free left vertices by alternating paths,
/// and their neighbours; the former outnumber the latter.
fn deficiency(g: &Csr, ml: &[usize], mr: &[usize], radius: f64) -> HallViolation {
    let n = ml.len();
    let mut seen_l = vec![false; n];
    let mut seen_r = vec![false; mr.len()];
    let mut queue: Vec<usize> = (0..n).filter(|&u| ml[u] == NONE).collect();
    for &u in &queue {
        seen_l[u] = true;
    }
    let mut head = 0;
    while head < queue.len() {
        let u = queue[head];
        head += 1;
        for &v in g.neighbors(u) {
            let v = v as usize;
            if !seen_r[v] {
                seen_r[v] = true;
                let w = mr[v];
                if w != NONE && !seen_l[w] {
                    seen_l[w] = true;
                    queue.push(w);
                }
            }
        }
    }
    HallViolation {
        radius,
        left: (0..n).filter(|&u| seen_l[u]).collect(),
        neighbors: (0..mr.len()).filter(|&v| seen_r[v]).collect(),
    }
}

/// Matching state reused across radii.
struct Solver<'a> {
    inst: &'a BipartiteInstance,
    grid: Grid,
    ml: Vec<usize>,
    mr: Vec<usize>,
    /// Edges up to some radius, reused for every smaller one.
    cache: Option<(f64, Graph)>,
}

impl<'a> Solver<'a> {
    fn new(inst: &'a BipartiteInstance) -> Self {
        let n = inst.n();
        Self { inst, grid: Grid::new(&inst.right), ml: vec![NONE; n], mr: vec![NONE; n], cache: None }
    }

    /// Caches the edges of cost `<= r`.
    fn prepare(&mut self, r: f64) {
        if !matches!(self.cache, Some((c, _)) if c == r) {
            self.cache = Some((r, edges(self.inst, &self.grid, r)));
        }
    }

    /// Tries to complete the current matching using pairs of cost `<= r`,
    /// first dropping pairs that are too long.
    fn try_radius(&mut self, r: f64) -> std::result::Result<(), HallViolation> {
        for i in 0..self.ml.len() {
            let j = self.ml[i];
            if j != NONE && self.inst.cost(i, j) > r {
                self.ml[i] = NONE;
                self.mr[j] = NONE;
            }
        }
        if !matches!(self.cache, Some((c, _)) if c >= r) {
            self.prepare(r);
        }
        let g = self.cache.as_ref().map(|(_, g)| g.restrict(r)).unwrap();
        max_matching(&g, &mut self.ml, &mut self.mr);
        if self.ml.iter().all(|&j| j != NONE) {
            Ok(())
        } else {
            Err(deficiency(&g, &self.ml, &self.mr, r))
        }
    }

    /// Largest over left items of the cost to the nearest right point; no
    /// perfect matching exists below it.
    fn lower_bound(&self) -> f64 {
        let mut lb = 0.0f64;
        for i in 0..self.inst.n() {
            let mut r = self.grid.h;
            loop {
                let mut best = f64::INFINITY;
                self.grid.for_each_in(&self.inst.reach(i, r), |j| best = best.min(self.inst.cost(i, j)));
                if best <= r {
                    lb = lb.max(best);
                    break;
                }
                r *= 2.0;
            }
        }
        lb
    }
}

/// Perfect matching using only pairs of cost `<= r`, or a Hall violation.
pub fn match_at_radius(inst: &BipartiteInstance, r: f64) -> Result<std::result::Result<Vec<usize>, HallViolation>> {
    inst.validate()?;
    let mut s = Solver::new(inst);
    Ok(s.try_radius(r).map(|_| s.ml.clone()))
}

/// Search state: a maximum matching at the largest radius known to be
/// infeasible, which seeds every trial, and the last feasible matching.
struct Probe {
    ml: Vec<usize>,
    mr: Vec<usize>,
    feasible: Vec<usize>,
}

impl Probe {
    fn run(&mut self, s: &mut Solver, r: f64) -> bool {
        s.ml.clone_from(&self.ml);
        s.mr.clone_from(&self.mr);
        if s.try_radius(r).is_ok() {
            self.feasible.clone_from(&s.ml);
            true
        } else {
            self.ml.clone_from(&s.ml);
            self.mr.clone_from(&s.mr);
            false
        }
    }
}

/// Most candidate costs collected at once before halving the window.
const CANDIDATE_CAP: usize = 1 << 22;

/// Exact bottleneck matching: the smallest `r` such that the pairs of cost
/// `<= r` admit a perfect matching, with a matching attaining it.
pub fn bottleneck_match(inst: &BipartiteInstance) -> Result<MatchingResult> {
    inst.validate()?;
    let mut s = Solver::new(inst);
    let lb = s.lower_bound();
    // Costs below `floor` are known infeasible; `floor_incl` says whether
    // `floor` itself is still a candidate.
    let (mut floor, mut floor_incl) = (lb, true);
    let mut hi = lb;
    let mut p = Probe { ml: s.ml.clone(), mr: s.mr.clone(), feasible: Vec::new() };
    while !p.run(&mut s, hi) {
        floor = hi;
        floor_incl = false;
        hi = if hi > 0.0 { 2.0 * hi } else { s.grid.h };
    }
    loop {
        s.prepare(hi);
        let g = &s.cache.as_ref().unwrap().1;
        let count = g.cost.iter().filter(|&&c| c > floor || (floor_incl && c == floor)).count();
        if count > CANDIDATE_CAP && hi - floor > hi * 1e-12 {
            let mid = 0.5 * (floor + hi);
            if p.run(&mut s, mid) {
                hi = mid;
            } else {
                floor = mid;
                floor_incl = false;
            }
            continue;
        }
        let mut cand: Vec<f64> =
            g.cost.iter().cloned().filter(|&c| c > floor || (floor_incl && c == floor)).collect();
        cand.sort_by(f64::total_cmp);
        cand.dedup();
        // The largest candidate is feasible: it admits the same pairs as `hi`.
        let (mut a, mut b) = (0usize, cand.len() - 1);
        while a < b {
            let m = (a + b) / 2;
            if p.run(&mut s, cand[m]) {
                b = m;
            } else {
                a = m + 1;
            }
        }
        let r = cand[a];
        s.ml.clone_from(&p.feasible);
        for (i, &j) in p.feasible.iter().enumerate() {
            s.mr[j] = i;
        }
        if s.try_radius(r).is_err() {
            return Err(Error::Config("bottleneck search lost feasibility".into()));
        }
        let perm = s.ml.clone();
        let radius = perm.iter().enumerate().map(|(i, &j)| inst.cost(i, j)).fold(0.0, f64::max);
        let certificate = if radius > 0.0 {
            let below = f64::from_bits(radius.to_bits() - 1);
            s.try_radius(below).err()
        } else {
            None
        };
        return Ok(MatchingResult { perm, bottleneck_radius: radius, feasible: true, certificate });
    }
}

/// Rectangle-to-sample matching with its transport.
#[derive(Clone, Debug)]
pub struct HallMatching {
    /// Bottleneck matching under the displacement cost `max_{x in Q} |x - y|`.
    pub matching: MatchingResult,
    /// Integer `l2` of the neighbourhood threshold.
    pub l2: i32,
    /// Neighbourhood threshold `2 sqrt(2) 2^{-l2}`.
    pub threshold: f64,
    /// Smallest radius at which every rectangle has a distinct sample
    /// within `dist(y, Q) <= r`; only computed when the displacement
    /// matching leaves the threshold, since it never exceeds that radius.
    pub near_radius: Option<f64>,
    /// Whether matching within the threshold failed.
    pub escalated: bool,
    pub max_rect_diameter: f64,
    /// Each rectangle sent to its matched sample.
    pub transport: ComposedTransport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallSummary {
    pub radius: f64,
    pub escalated: bool,
    pub n: usize,
}

impl HallMatching {
    pub fn summary(&self) -> HallSummary {
        HallSummary { radius: self.matching.bottleneck_radius, escalated: self.escalated, n: self.matching.perm.len() }
    }
}

/// Largest integer `l2` with `2^{-l2} >= 2^6 l_cfg (ln n)^{3/4} / sqrt(n)`,
/// capped at 60.
pub fn hall_level(n: usize, l_cfg: f64) -> i32 {
    let nf = n as f64;
    let c = 64.0 * l_cfg * nf.ln().max(0.0).powf(0.75) / nf.sqrt();
    if c <= 0.0 {
        return 60;
    }
    let mut l = (-c.log2()).floor() as i32;
    // Guard the floor against rounding at exact powers of two.
    while (-(l as f64 + 1.0)).exp2() >= c {
        l += 1;
    }
    while (-(l as f64)).exp2() < c {
        l -= 1;
    }
    l.min(60)
}

/// Matches the `n` rectangles of `partition` to the `n` sample points.
pub fn hall_matching_2d(sample: &EmpiricalMeasure, partition: &RectanglePartition, l_cfg: f64) -> Result<HallMatching> {
    let n = sample.n();
    if sample.dim() != 2 {
        return Err(Error::Dimension { expected: 2, got: sample.dim() });
    }
    if partition.rects.len() != n {
        return Err(Error::Config(format!("{} rectangles for {} samples", partition.rects.len(), n)));
    }
    let l2 = hall_level(n, l_cfg);
    let threshold = 2.0 * std::f64::consts::SQRT_2 * (-(l2 as f64)).exp2();
    let far = BipartiteInstance { left: Left::BoxesFar(partition.rects.clone()), right: sample.points.clone() };
    let matching = bottleneck_match(&far)?;
    let near_radius = if matching.bottleneck_radius > threshold {
        let near = BipartiteInstance { left: Left::Boxes(partition.rects.clone()), right: sample.points.clone() };
        Some(bottleneck_match(&near)?.bottleneck_radius)
    } else {
        None
    };
    let atoms = matching.perm.iter().map(|&j| sample.points[j].clone()).collect();
    let transport = ComposedTransport::from_stages(vec![Stage::atoms(AtomStage::new(partition.rects.clone(), atoms))]);
    Ok(HallMatching {
        matching,
        l2,
        threshold,
        near_radius,
        escalated: near_radius.is_some_and(|r| r > threshold),
        max_rect_diameter: partition.max_diameter(),
        transport,
    })
}

/// Largest mesh exponent of the discrepancy diagnostic.
pub const MAX_MESH_EXPONENT: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub n: usize,
    pub mesh_exponent: u32,
    pub max_ratio: f64,
    /// Grid rectangle attaining the maximum.
    pub argmax: Aabb,
    /// `|count - n nu(R)|` on that rectangle.
    pub max_excess: f64,
}

/// Max over grid-aligned rectangles `R` of the `2^l` mesh on the domain's
/// bounding box of `|count(R) - n nu(R)| / (perimeter(R) sqrt(n) max(ln n, 1)^{3/4})`.
pub fn grid_discrepancy_diagnostic(sample: &EmpiricalMeasure, density: &Density, l: u32) -> Result<DiscrepancyReport> {
    if l > MAX_MESH_EXPONENT {
        return Err(Error::MeshCap(l));
    }
    if density.dim() != 2 || sample.dim() != 2 {
        return Err(Error::Dimension { expected: 2, got: if density.dim() != 2 { density.dim() } else { sample.dim() } });
    }
    let bb = density.domain().bounding_box();
    let m = 1usize << l;
    let n = sample.n();
    let nf = n as f64;
    let (hx, hy) = (bb.side(0) / m as f64, bb.side(1) / m as f64);
    let edge = |a: usize, i: usize| if i == m { bb.hi[a] } else { bb.lo[a] + i as f64 * if a == 0 { hx } else { hy } };
    // Prefix sums over (m + 1)^2 corners of `count - n nu`.
    let w = m + 1;
    let mut p = vec![0.0f64; w * w];
    for i in 0..m {
        for j in 0..m {
            let c = Aabb::closed(vec![edge(0, i), edge(1, j)], vec![edge(0, i + 1), edge(1, j + 1)]);
            p[(i + 1) * w + j + 1] = -nf * density.measure_of_box(&c);
        }
    }
    let cell = |a: usize, x: f64| {
        let t = ((x - bb.lo[a]) / bb.side(a) * m as f64).floor();
        if t <= 0.0 { 0 } else { (t as usize).min(m - 1) }
    };
    for x in &sample.points {
        if bb.contains(x) {
            p[(cell(0, x[0]) + 1) * w + cell(1, x[1]) + 1] += 1.0;
        }
    }
    for i in 1..w {
        for j in 1..w {
            p[i * w + j] += p[(i - 1) * w + j] + p[i * w + j - 1] - p[(i - 1) * w + j - 1];
        }
    }
    let scale = nf.sqrt() * nf.ln().max(1.0).powf(0.75);
    let mut best = (0.0f64, 0.0f64, [0usize, 1, 0, 1]);
    for i0 in 0..m {
        for i1 in i0 + 1..=m {
            let px = 2.0 * (i1 - i0) as f64 * hx;
            for j0 in 0..m {
                let a = p[i1 * w + j0] - p[i0 * w + j0];
                for j1 in j0 + 1..=m {
                    let v = (p[i1 * w + j1] - p[i0 * w + j1] - a).abs();
                    let ratio = v / ((px + 2.0 * (j1 - j0) as f64 * hy) * scale);
                    if ratio > best.0 {
                        best = (ratio, v, [i0, i1, j0, j1]);
                    }
                }
            }
        }
    }
    let [i0, i1, j0, j1] = best.2;
    Ok(DiscrepancyReport {
        n,
        mesh_exponent: l,
        max_ratio: best.0,
        argmax: Aabb::closed(vec![edge(0, i0), edge(1, j0)], vec![edge(0, i1), edge(1, j1)]),
        max_excess: best.1,
    })
}
