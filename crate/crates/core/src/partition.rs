//! Dyadic partitions by volume (`G_k`) and by mass (`F_k`), and the
//! equal-mass rectangle partition of the unit square.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MassOracle;
use crate::geometry::Aabb;

/// Deepest partition level accepted.
pub const MAX_LEVEL: u32 = 40;

/// A node of a binary box partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionNode {
    pub bx: Aabb,
    pub level: u32,
    pub nu_mass: f64,
    pub split_axis: Option<usize>,
    /// Empty for leaves, otherwise `[lower, upper]`.
    pub children: Vec<PartitionNode>,
}

/// Flat record used for JSON export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub level: u32,
    pub nu_mass: f64,
}

impl PartitionNode {
    fn leaf(bx: Aabb, level: u32, nu_mass: f64) -> Self {
        Self { bx, level, nu_mass, split_axis: None, children: Vec::new() }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// All nodes in depth-first pre-order.
    pub fn nodes(&self) -> Vec<&PartitionNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(n.children.iter().rev());
        }
        out
    }

    pub fn leaves(&self) -> Vec<&PartitionNode> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).collect()
    }

    /// Nodes at `level`, in left-to-right order.
    pub fn level_nodes(&self, level: u32) -> Vec<&PartitionNode> {
        self.nodes().into_iter().filter(|n| n.level == level).collect()
    }

    pub fn depth(&self) -> u32 {
        self.nodes().iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn max_aspect_ratio(&self) -> f64 {
        self.nodes().iter().map(|n| n.bx.aspect_ratio()).fold(1.0, f64::max)
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes()
            .into_iter()
            .map(|n| NodeRecord { lo: n.bx.lo.clone(), hi: n.bx.hi.clone(), level: n.level, nu_mass: n.nu_mass })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records())?)
    }
}

fn check_depth(depth: u32) -> Result<()> {
    if depth > MAX_LEVEL {
        return Err(Error::DepthCap(depth));
    }
    Ok(())
}

/// `G_k`: `depth` rounds of midpoint bisection through the longest side.
/// `nu_mass` records Lebesgue volume.
pub fn dyadic_lebesgue(bx: &Aabb, depth: u32) -> Result<PartitionNode> {
    check_depth(depth)?;
    fn build(bx: Aabb, level: u32, depth: u32) -> PartitionNode {
        let mut node = PartitionNode::leaf(bx, level, 0.0);
        node.nu_mass = node.bx.volume();
        if level < depth {
            let axis = node.bx.longest_axis();
            let mid = 0.5 * (node.bx.lo[axis] + node.bx.hi[axis]);
            let (a, b) = node.bx.split(axis, mid);
            node.split_axis = Some(axis);
            node.children = vec![build(a, level + 1, depth), build(b, level + 1, depth)];
        }
        node
    }
    Ok(build(bx.clone(), 0, depth))
}

/// `F_k`: `depth` rounds of bisection through the longest side into two
/// halves of equal mass. Every node is checked against the aspect-ratio
/// bound `2 lambda^2`.
pub fn dyadic_nu<M: MassOracle + ?Sized>(oracle: &M, bx: &Aabb, depth: u32, lambda: f64) -> Result<PartitionNode> {
    check_depth(depth)?;
    let bound = 2.0 * lambda * lambda;
    fn build<M: MassOracle + ?Sized>(
        oracle: &M,
        bx: Aabb,
        mass: f64,
        level: u32,
        depth: u32,
        bound: f64,
    ) -> Result<PartitionNode> {
        let ratio = bx.aspect_ratio();
        if ratio > bound {
            return Err(Error::AspectRatio { ratio, bound });
        }
        let mut node = PartitionNode::leaf(bx, level, mass);
        if level < depth {
            let axis = node.bx.longest_axis();
            let s = oracle.split_at_fraction(&node.bx, axis, 0.5)?;
            let (a, b) = node.bx.split(axis, s);
            node.split_axis = Some(axis);
            node.children = vec![
                build(oracle, a, 0.5 * mass, level + 1, depth, bound)?,
                build(oracle, b, 0.5 * mass, level + 1, depth, bound)?,
            ];
        }
        Ok(node)
    }
    let mass = oracle.mass_in(bx);
    if !(mass > 0.0) {
        return Err(Error::InvalidDensity("no mass on the partition root".into()));
    }
    build(oracle, bx.clone(), mass, 0, depth, bound)
}

/// Equal-mass rectangles and the ratio bound they were built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectanglePartition {
    pub rects: Vec<Aabb>,
    pub nu_mass_each: f64,
    pub lambda: f64,
}

impl RectanglePartition {
    pub fn max_diameter(&self) -> f64 {
        self.rects.iter().map(Aabb::diameter).fold(0.0, f64::max)
    }

    pub fn max_aspect_ratio(&self) -> f64 {
        self.rects.iter().map(Aabb::aspect_ratio).fold(1.0, f64::max)
    }

    /// Measured constant `C` in `diam <= C / sqrt(n)`.
    pub fn diameter_constant(&self) -> f64 {
        self.max_diameter() * (self.rects.len() as f64).sqrt()
    }
}

/// `n` rectangles of equal mass covering `bx` (normally the unit
/// square). A region of count `m` is split through its longest side with
/// `floor(m/2)` on the lower side. Every rectangle is checked against the
/// aspect-ratio bound `3 lambda^2`.
pub fn rectangle_partition_n<M: MassOracle + ?Sized>(
    oracle: &M,
    bx: &Aabb,
    n: usize,
    lambda: f64,
) -> Result<RectanglePartition> {
    if n == 0 {
        return Err(Error::EmptyPartition);
    }
    let bound = 3.0 * lambda * lambda;
    let total = oracle.mass_in(bx);
    let mut rects = Vec::with_capacity(n);
    let mut stack = vec![(bx.clone(), n)];
    while let Some((q, m)) = stack.pop() {
        let ratio = q.aspect_ratio();
        if ratio > bound {
            return Err(Error::AspectRatio { ratio, bound });
        }
        if m == 1 {
            rects.push(q);
            continue;
        }
        let axis = q.longest_axis();
        let h = m / 2;
        let s = oracle.split_at_mass(&q, axis, total * h as f64 / n as f64)?;
        let (a, b) = q.split(axis, s);
        stack.push((b, m - h));
        stack.push((a, h));
    }
    Ok(RectanglePartition { rects, nu_mass_each: total / n as f64, lambda })
}
