//! Axis-aligned boxes, box-union domains and a small bounding-volume
//! hierarchy for point location among disjoint boxes.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when deciding whether two facets touch.
const TOUCH_EPS: f64 = 1e-12;

/// Closed axis-aligned box `[lo, hi]`.
///
/// Boxes built with [`Aabb::new`] have strictly positive side lengths.
/// Degenerate boxes (some `lo[i] == hi[i]`) only arise internally, e.g. as
/// shared facets or images of zero-slope map pieces, through
/// [`Aabb::closed`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Aabb {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension { expected: lo.len(), got: hi.len() });
        }
        if lo.is_empty() {
            return Err(Error::InvalidBox("zero-dimensional box".into()));
        }
        for i in 0..lo.len() {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] < hi[i]) {
                return Err(Error::InvalidBox(format!(
                    "need lo[{i}] < hi[{i}], got {} and {}",
                    lo[i], hi[i]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Box allowed to be degenerate (`lo[i] <= hi[i]`).
    pub fn closed(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        debug_assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
        Self { lo, hi }
    }

    pub fn unit(d: usize) -> Self {
        Self { lo: vec![0.0; d], hi: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn sides(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.side(i)).collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i).powi(2)).sum::<f64>().sqrt()
    }

    /// Longest side over shortest side.
    pub fn aspect_ratio(&self) -> f64 {
        let s = self.sides();
        let max = s.iter().cloned().fold(f64::MIN, f64::max);
        let min = s.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }

    /// Index of the longest side; ties go to the smallest index.
    pub fn longest_axis(&self) -> usize {
        let mut best = 0;
        for i in 1..self.dim() {
            if self.side(i) > self.side(best) {
                best = i;
            }
        }
        best
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn is_degenerate(&self) -> bool {
        (0..self.dim()).any(|i| self.lo[i] >= self.hi[i])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo[i] && v <= self.hi[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..self.dim()).all(|i| other.lo[i] >= self.lo[i] && other.hi[i] <= self.hi[i])
    }

    /// Closed intersection; `None` when the boxes are separated.
    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let a = self.lo[i].max(other.lo[i]);
            let b = self.hi[i].min(other.hi[i]);
            if a > b {
                return None;
            }
            lo.push(a);
            hi.push(b);
        }
        Some(Aabb { lo, hi })
    }

    pub fn overlap_volume(&self, other: &Aabb) -> f64 {
        let mut v = 1.0;
        for i in 0..self.dim() {
            let len = self.hi[i].min(other.hi[i]) - self.lo[i].max(other.lo[i]);
            if len <= 0.0 {
                return 0.0;
            }
            v *= len;
        }
        v
    }

    /// Splits at coordinate `at` along `axis` into (lower, upper).
    pub fn split(&self, axis: usize, at: f64) -> (Aabb, Aabb) {
        let mut a = self.clone();
        let mut b = self.clone();
        a.hi[axis] = at;
        b.lo[axis] = at;
        (a, b)
    }

    pub fn with_axis(&self, axis: usize, lo: f64, hi: f64) -> Aabb {
        let mut b = self.clone();
        b.lo[axis] = lo;
        b.hi[axis] = hi;
        b
    }

    /// Euclidean distance from `x` to the box (0 inside).
    pub fn distance_to(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            let d = if x[i] < self.lo[i] {
                self.lo[i] - x[i]
            } else if x[i] > self.hi[i] {
                x[i] - self.hi[i]
            } else {
                0.0
            };
            s += d * d;
        }
        s.sqrt()
    }

    /// Largest Euclidean distance from `x` to a point of the box.
    pub fn farthest_distance(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            let d = (x[i] - self.lo[i]).abs().max((x[i] - self.hi[i]).abs());
            s += d * d;
        }
        s.sqrt()
    }

    /// Minkowski enlargement by `r` in every coordinate direction.
    pub fn enlarged(&self, r: f64) -> Aabb {
        Aabb {
            lo: self.lo.iter().map(|v| v - r).collect(),
            hi: self.hi.iter().map(|v| v + r).collect(),
        }
    }

    pub fn union_hull(&self, other: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    /// Lexicographic order of the `lo` corners, used for tie-breaking.
    pub fn cmp_lo(&self, other: &Aabb) -> Ordering {
        for (a, b) in self.lo.iter().zip(&other.lo) {
            match a.partial_cmp(b).unwrap_or(Ordering::Equal) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }

    /// `self \ other` as a list of interior-disjoint boxes.
    pub fn difference(&self, other: &Aabb) -> Vec<Aabb> {
        if self.overlap_volume(other) <= 0.0 {
            return vec![self.clone()];
        }
        let mut out = Vec::new();
        let mut rest = self.clone();
        for i in 0..self.dim() {
            if other.lo[i] > rest.lo[i] {
                let (below, above) = rest.split(i, other.lo[i]);
                out.push(below);
                rest = above;
            }
            if other.hi[i] < rest.hi[i] {
                let (below, above) = rest.split(i, other.hi[i]);
                out.push(above);
                rest = below;
            }
        }
        out
    }
}

/// Shared facet between two domain boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    /// Box on the lower side of the hyperplane.
    pub lower: usize,
    /// Box on the upper side of the hyperplane.
    pub upper: usize,
    pub axis: usize,
    pub coord: f64,
    /// The facet itself, degenerate along `axis`.
    pub region: Aabb,
}

impl Facet {
    pub fn other(&self, i: usize) -> usize {
        if self.lower == i {
            self.upper
        } else {
            self.lower
        }
    }

    /// (d-1)-dimensional measure of the facet.
    pub fn measure(&self) -> f64 {
        (0..self.region.dim())
            .filter(|&i| i != self.axis)
            .map(|i| self.region.side(i))
            .product()
    }
}

/// Connected union of interior-disjoint boxes.
#[derive(Clone, Debug)]
pub struct BoxUnionDomain {
    boxes: Vec<Aabb>,
    facets: Vec<Facet>,
    adjacency: Vec<Vec<usize>>,
    index: BoxIndex,
}

impl BoxUnionDomain {
    pub fn new(boxes: Vec<Aabb>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::InvalidBox("domain has no boxes".into()));
        }
        let d = boxes[0].dim();
        for b in &boxes {
            if b.dim() != d {
                return Err(Error::Dimension { expected: d, got: b.dim() });
            }
            Aabb::new(b.lo.clone(), b.hi.clone())?;
        }
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                let ov = boxes[i].overlap_volume(&boxes[j]);
                if ov > TOUCH_EPS * boxes[i].volume().min(boxes[j].volume()) {
                    return Err(Error::InvalidBox(format!(
                        "boxes {i} and {j} have overlapping interiors"
                    )));
                }
            }
        }
        let facets = find_facets(&boxes);
        let mut adjacency = vec![Vec::new(); boxes.len()];
        for (fi, f) in facets.iter().enumerate() {
            adjacency[f.lower].push(fi);
            adjacency[f.upper].push(fi);
        }
        let index = BoxIndex::new(&boxes);
        let dom = Self { boxes, facets, adjacency, index };
        let comps = dom.components(&vec![true; dom.boxes.len()]);
        if comps.len() > 1 {
            return Err(Error::Disconnected(comps));
        }
        Ok(dom)
    }

    pub fn single(b: Aabb) -> Self {
        Self::new(vec![b]).expect("a single valid box is a valid domain")
    }

    pub fn unit(d: usize) -> Self {
        Self::single(Aabb::unit(d))
    }

    pub fn dim(&self) -> usize {
        self.boxes[0].dim()
    }

    pub fn boxes(&self) -> &[Aabb] {
        &self.boxes
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    /// Facet indices incident to box `i`.
    pub fn incident(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.adjacency[i].iter().map(|&f| self.facets[f].other(i)).collect()
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(Aabb::volume).sum()
    }

    pub fn bounding_box(&self) -> Aabb {
        self.boxes[1..]
            .iter()
            .fold(self.boxes[0].clone(), |acc, b| acc.union_hull(b))
    }

    pub fn diameter_bound(&self) -> f64 {
        self.bounding_box().diameter()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.locate(x).is_some()
    }

    /// Box containing `x`; on shared boundaries the box with the
    /// lexicographically smaller `lo` corner wins.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        self.index.locate(&self.boxes, x)
    }

    /// Connected components (by facet adjacency) of the boxes flagged active.
    pub fn components(&self, active: &[bool]) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.boxes.len()];
        let mut comps = Vec::new();
        for start in 0..self.boxes.len() {
            if !active[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(v) = queue.pop_front() {
                comp.push(v);
                for w in self.neighbors(v) {
                    if active[w] && !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// Splits every box along all box-boundary coordinates of the domain so
    /// that neighbouring boxes share full faces.
    pub fn conforming(&self) -> Self {
        let d = self.dim();
        let mut coords: Vec<Vec<f64>> = vec![Vec::new(); d];
        for b in &self.boxes {
            for i in 0..d {
                coords[i].push(b.lo[i]);
                coords[i].push(b.hi[i]);
            }
        }
        for c in &mut coords {
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c.dedup();
        }
        let mut out = Vec::new();
        for b in &self.boxes {
            let mut pieces = vec![b.clone()];
            for i in 0..d {
                let mut next = Vec::new();
                for p in pieces {
                    let mut cur = p;
                    for &c in &coords[i] {
                        if c > cur.lo[i] && c < cur.hi[i] {
                            let (a, rest) = cur.split(i, c);
                            next.push(a);
                            cur = rest;
                        }
                    }
                    next.push(cur);
                }
                pieces = next;
            }
            out.extend(pieces);
        }
        Self::new(out).expect("refinement of a valid domain is valid")
    }
}

fn find_facets(boxes: &[Aabb]) -> Vec<Facet> {
    let d = boxes[0].dim();
    let mut facets = Vec::new();
    for i in 0..boxes.len() {
        for j in 0..boxes.len() {
            if i == j {
                continue;
            }
            let (a, b) = (&boxes[i], &boxes[j]);
            for axis in 0..d {
                let scale = a.side(axis).max(b.side(axis));
                if (a.hi[axis] - b.lo[axis]).abs() > TOUCH_EPS * scale {
                    continue;
                }
                let mut lo = Vec::with_capacity(d);
                let mut hi = Vec::with_capacity(d);
                let mut positive = true;
                for k in 0..d {
                    if k == axis {
                        lo.push(a.hi[axis]);
                        hi.push(a.hi[axis]);
                        continue;
                    }
                    let l = a.lo[k].max(b.lo[k]);
                    let h = a.hi[k].min(b.hi[k]);
                    if h - l <= TOUCH_EPS * a.side(k).max(b.side(k)) {
                        positive = false;
                        break;
                    }
                    lo.push(l);
                    hi.push(h);
                }
                if positive {
                    facets.push(Facet {
                        lower: i,
                        upper: j,
                        axis,
                        coord: a.hi[axis],
                        region: Aabb::closed(lo, hi),
                    });
                }
            }
        }
    }
    facets
}

/// Bounding-volume hierarchy over a fixed list of boxes.
#[derive(Clone, Debug)]
pub struct BoxIndex {
    nodes: Vec<BvhNode>,
}

#[derive(Clone, Debug)]
struct BvhNode {
    hull: Aabb,
    /// Leaf payload (box indices) or child node indices.
    kind: BvhKind,
}

#[derive(Clone, Debug)]
enum BvhKind {
    Leaf(Vec<usize>),
    Inner(usize, usize),
}

const BVH_LEAF: usize = 8;

impl BoxIndex {
    pub fn new(boxes: &[Aabb]) -> Self {
        let mut idx = Self { nodes: Vec::new() };
        if !boxes.is_empty() {
            let items: Vec<usize> = (0..boxes.len()).collect();
            idx.build(boxes, items);
        }
        idx
    }

    fn build(&mut self, boxes: &[Aabb], mut items: Vec<usize>) -> usize {
        let hull = items[1..]
            .iter()
            .fold(boxes[items[0]].clone(), |acc, &i| acc.union_hull(&boxes[i]));
        let id = self.nodes.len();
        if items.len() <= BVH_LEAF {
            self.nodes.push(BvhNode { hull, kind: BvhKind::Leaf(items) });
            return id;
        }
        self.nodes.push(BvhNode { hull: hull.clone(), kind: BvhKind::Leaf(Vec::new()) });
        let axis = hull.longest_axis();
        items.sort_by(|&a, &b| {
            let ca = boxes[a].lo[axis] + boxes[a].hi[axis];
            let cb = boxes[b].lo[axis] + boxes[b].hi[axis];
            ca.partial_cmp(&cb).unwrap_or(Ordering::Equal)
        });
        let right = items.split_off(items.len() / 2);
        let l = self.build(boxes, items);
        let r = self.build(boxes, right);
        self.nodes[id].kind = BvhKind::Inner(l, r);
        id
    }

    /// All boxes (closed) containing `x`.
    pub fn containing(&self, boxes: &[Aabb], x: &[f64]) -> Vec<usize> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !node.hull.contains(x) {
                continue;
            }
            match &node.kind {
                BvhKind::Leaf(items) => {
                    out.extend(items.iter().copied().filter(|&i| boxes[i].contains(x)))
                }
                BvhKind::Inner(l, r) => {
                    stack.push(*l);
                    stack.push(*r);
                }
            }
        }
        out
    }

    /// Containing box with the lexicographically smallest `lo` corner.
    pub fn locate(&self, boxes: &[Aabb], x: &[f64]) -> Option<usize> {
        self.containing(boxes, x)
            .into_iter()
            .min_by(|&a, &b| boxes[a].cmp_lo(&boxes[b]).then(a.cmp(&b)))
    }

    /// Boxes whose closed extent meets `q`.
    pub fn touching(&self, boxes: &[Aabb], q: &Aabb) -> Vec<usize> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.hull.intersection(q).is_none() {
                continue;
            }
            match &node.kind {
                BvhKind::Leaf(items) => out.extend(
                    items.iter().copied().filter(|&i| boxes[i].intersection(q).is_some()),
                ),
                BvhKind::Inner(l, r) => {
                    stack.push(*l);
                    stack.push(*r);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(lo: &[f64], hi: &[f64]) -> Aabb {
        Aabb::new(lo.to_vec(), hi.to_vec()).unwrap()
    }

    #[test]
    fn box_metrics() {
        let b = bx(&[0.0, 0.0], &[2.0, 1.0]);
        assert_eq!(b.volume(), 2.0);
        assert!((b.diameter() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(b.aspect_ratio(), 2.0);
        assert_eq!(b.longest_axis(), 0);
        assert_eq!(bx(&[0.0, 0.0], &[1.0, 1.0]).longest_axis(), 0);
    }

    #[test]
    fn rejects_inverted_box() {
        assert!(Aabb::new(vec![1.0], vec![0.0]).is_err());
        assert!(Aabb::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn difference_tiles_the_remainder() {
        let a = bx(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let b = bx(&[0.2, 0.3, -1.0], &[0.5, 0.9, 0.4]);
        let parts = a.difference(&b);
        let vol: f64 = parts.iter().map(Aabb::volume).sum();
        let cut = a.overlap_volume(&b);
        assert!((vol + cut - 1.0).abs() < 1e-14);
        for p in &parts {
            assert!(p.overlap_volume(&b) <= 0.0);
        }
    }

    #[test]
    fn l_shape_adjacency() {
        let dom = BoxUnionDomain::new(vec![
            bx(&[0.0, 0.0], &[1.0, 0.5]),
            bx(&[0.0, 0.5], &[0.5, 1.0]),
        ])
        .unwrap();
        assert_eq!(dom.facets().len(), 1);
        let f = &dom.facets()[0];
        assert_eq!((f.lower, f.upper, f.axis), (0, 1, 1));
        assert!((f.measure() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn corner_contact_is_not_adjacency() {
        let err = BoxUnionDomain::new(vec![
            bx(&[0.0, 0.0], &[1.0, 1.0]),
            bx(&[1.0, 1.0], &[2.0, 2.0]),
        ])
        .unwrap_err();
        match err {
            Error::Disconnected(c) => assert_eq!(c, vec![vec![0], vec![1]]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tie_rule_prefers_smaller_lo() {
        let dom = BoxUnionDomain::new(vec![
            bx(&[0.5, 0.0], &[1.0, 1.0]),
            bx(&[0.0, 0.0], &[0.5, 1.0]),
        ])
        .unwrap();
        assert_eq!(dom.locate(&[0.5, 0.3]), Some(1));
        assert_eq!(dom.locate(&[0.7, 0.3]), Some(0));
        assert_eq!(dom.locate(&[1.5, 0.3]), None);
    }

    #[test]
    fn conforming_refinement_matches_faces() {
        let dom = BoxUnionDomain::new(vec![
            bx(&[0.0, 0.0], &[2.0, 1.0]),
            bx(&[0.5, 1.0], &[1.0, 2.0]),
        ])
        .unwrap();
        let c = dom.conforming();
        assert_eq!(c.boxes().len(), 4);
        assert!((c.volume() - dom.volume()).abs() < 1e-14);
        let f = c.facets().iter().find(|f| f.axis == 1).unwrap();
        assert!((f.measure() - 0.5).abs() < 1e-15);
        assert_eq!(c.boxes()[f.lower].side(0), c.boxes()[f.upper].side(0));
    }

    #[test]
    fn bvh_matches_linear_scan() {
        let mut boxes = Vec::new();
        for i in 0..10 {
            for j in 0..7 {
                let (x, y) = (i as f64 * 0.1, j as f64 / 7.0);
                boxes.push(bx(&[x, y], &[x + 0.1, y + 1.0 / 7.0]));
            }
        }
        let idx = BoxIndex::new(&boxes);
        for k in 0..200 {
            let p = [(k as f64 * 0.6180339) % 1.0, (k as f64 * 0.41421) % 1.0];
            let lin = boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains(&p))
                .map(|(i, _)| i)
                .min_by(|&a, &b| boxes[a].cmp_lo(&boxes[b]));
            assert_eq!(idx.locate(&boxes, &p), lin);
        }
    }
}
