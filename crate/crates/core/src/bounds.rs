//! Binomial tail bounds and instance-wise lower-bound certificates for the
//! sup-transport distance.

use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::sampling::EmpiricalMeasure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailKind {
    Chernoff,
    Bernstein,
}

/// Bound on `P(|S_m / m - p| >= t)` for `S_m ~ Bin(m, p)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    pub m: u64,
    pub p: f64,
    pub t: f64,
    pub bound: f64,
    pub kind: TailKind,
}

fn check_tail(m: u64, p: f64, t: f64) -> Result<()> {
    if m == 0 || !(0.0..=1.0).contains(&p) || !(t > 0.0) {
        return Err(Error::Config(format!("tail bound needs m >= 1, p in [0,1], t > 0; got m={m}, p={p}, t={t}")));
    }
    Ok(())
}

/// `2 exp(-2 m t^2)`.
pub fn chernoff(m: u64, p: f64, t: f64) -> Result<TailBound> {
    check_tail(m, p, t)?;
    let bound = 2.0 * (-2.0 * m as f64 * t * t).exp();
    Ok(TailBound { m, p, t, bound, kind: TailKind::Chernoff })
}

/// `2 exp(-(m t^2 / 2) / (p (1 - p) + t / 3))`.
pub fn bernstein(m: u64, p: f64, t: f64) -> Result<TailBound> {
    check_tail(m, p, t)?;
    let bound = 2.0 * (-(0.5 * m as f64 * t * t) / (p * (1.0 - p) + t / 3.0)).exp();
    Ok(TailBound { m, p, t, bound, kind: TailKind::Bernstein })
}

/// Largest mesh exponent of the certificate search.
pub const MAX_CERT_MESH: u32 = 7;

/// Witness that no coupling moves mass by at most `r`.
///
/// Forward: `nu_n(A) > nu(A^r)`. Reverse: `nu(A) > nu_n(A^r)`. Either one
/// forces `d_inf(nu, nu_n) > r`. For a union of mesh cells `A^r` is
/// over-approximated by growing `A` by `floor(r / h) + 1` cells along each
/// axis; for a single box the forward side uses the box grown by `r` and the
/// reverse side counts points within distance `r` exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCertificate {
    pub r: f64,
    /// Multi-indices of the mesh cells forming `A`; empty when `A` is
    /// `witness_box`.
    pub witness_cells: Vec<Vec<usize>>,
    pub witness_box: Option<Aabb>,
    pub nu_n_mass: f64,
    pub nu_enlarged_mass: f64,
    /// Set for the reverse direction; then `nu_n_mass` is `nu_n(A^r)` and
    /// `nu_enlarged_mass` is `nu(A)`.
    pub reverse: bool,
    pub mesh_exponent: u32,
}

/// Mesh of `m^d` cells over a box.
struct Mesh {
    bx: Aabb,
    m: usize,
    d: usize,
}

impl Mesh {
    fn len(&self) -> usize {
        self.m.pow(self.d as u32)
    }

    fn unflatten(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d];
        for a in (0..self.d).rev() {
            idx[a] = k % self.m;
            k /= self.m;
        }
        idx
    }

    fn cell(&self, k: usize) -> Aabb {
        let idx = self.unflatten(k);
        let mut lo = Vec::with_capacity(self.d);
        let mut hi = Vec::with_capacity(self.d);
        for a in 0..self.d {
            let h = self.bx.side(a) / self.m as f64;
            lo.push(self.bx.lo[a] + idx[a] as f64 * h);
            hi.push(if idx[a] + 1 == self.m { self.bx.hi[a] } else { self.bx.lo[a] + (idx[a] + 1) as f64 * h });
        }
        Aabb::closed(lo, hi)
    }

    fn locate(&self, x: &[f64]) -> Option<usize> {
        if !self.bx.contains(x) {
            return None;
        }
        let mut k = 0;
        for a in 0..self.d {
            let t = ((x[a] - self.bx.lo[a]) / self.bx.side(a) * self.m as f64).floor();
            let i = if t <= 0.0 { 0 } else { (t as usize).min(self.m - 1) };
            k = k * self.m + i;
        }
        Some(k)
    }

    /// Cells within `steps[a]` index steps of the mask along every axis.
    fn dilate(&self, mask: &[bool], steps: &[usize]) -> Vec<bool> {
        let mut cur: Vec<u32> = mask.iter().map(|&b| b as u32).collect();
        let m = self.m;
        for a in 0..self.d {
            let w = steps[a];
            if w == 0 {
                continue;
            }
            let stride = m.pow((self.d - 1 - a) as u32);
            let mut next = vec![0u32; cur.len()];
            for base in 0..cur.len() {
                if (base / stride) % m != 0 {
                    continue;
                }
                // Sliding-window count along the line starting at `base`.
                let mut pre = vec![0u32; m + 1];
                for i in 0..m {
                    pre[i + 1] = pre[i] + cur[base + i * stride].min(1);
                }
                for i in 0..m {
                    let lo = i.saturating_sub(w);
                    let hi = (i + w + 1).min(m);
                    next[base + i * stride] = pre[hi] - pre[lo];
                }
            }
            cur = next;
        }
        cur.into_iter().map(|c| c > 0).collect()
    }

    /// Sums of `vals` over the `(2w + 1)^d` block of cells around each cell.
    fn window_sum(&self, vals: &[f64], w: usize) -> Vec<f64> {
        let m = self.m;
        let mut cur = vals.to_vec();
        for a in 0..self.d {
            let stride = m.pow((self.d - 1 - a) as u32);
            let mut next = vec![0.0; cur.len()];
            for base in 0..cur.len() {
                if (base / stride) % m != 0 {
                    continue;
                }
                for i in 0..m {
                    let (lo, hi) = (i.saturating_sub(w), (i + w + 1).min(m));
                    next[base + i * stride] = (lo..hi).map(|t| cur[base + t * stride]).sum();
                }
            }
            cur = next;
        }
        cur
    }

    /// The mesh with `2^j` times coarser cells, with `vals` summed into it.
    fn coarsen(&self, vals: &[f64], j: u32) -> (Mesh, Vec<f64>) {
        let coarse = Mesh { bx: self.bx.clone(), m: self.m >> j, d: self.d };
        let mut out = vec![0.0; coarse.len()];
        for (k, &v) in vals.iter().enumerate() {
            let c = self.unflatten(k).iter().fold(0, |acc, &i| acc * coarse.m + (i >> j));
            out[c] += v;
        }
        (coarse, out)
    }
}

/// Margin by which a witness inequality must hold, so that rounding in the
/// summed masses cannot produce one.
pub const MASS_MARGIN: f64 = 1e-9;

/// Blocks of `2^j` cells per axis examined exactly, per direction and `j`.
const BOX_CANDIDATES: usize = 16;

/// Coarsest block level examined, as a power of two of the mesh cell.
const BOX_LEVELS: u32 = 4;

/// Single-box witnesses: aligned blocks of mesh cells ranked by their excess
/// over the surrounding cells, then certified with exact masses.
fn box_witnesses(
    density: &Density,
    sample: &EmpiricalMeasure,
    mesh: &Mesh,
    nu: &[f64],
    emp: &[f64],
    best: &mut LowerBoundCertificate,
) {
    let n = sample.n() as f64;
    let mass = density.mass();
    let diam = mesh.bx.diameter();
    let l = best.mesh_exponent;
    for j in 0..=BOX_LEVELS.min(l) {
        let (coarse, nu_c) = mesh.coarsen(nu, j);
        let (_, emp_c) = mesh.coarsen(emp, j);
        for reverse in [false, true] {
            let (inner, outer) = if reverse { (&nu_c, &emp_c) } else { (&emp_c, &nu_c) };
            let around = coarse.window_sum(outer, 1);
            let mut order: Vec<usize> = (0..coarse.len()).filter(|&k| inner[k] > 0.0).collect();
            order.sort_by(|&a, &b| (inner[b] - around[b]).total_cmp(&(inner[a] - around[a])).then(a.cmp(&b)));
            for &k in order.iter().take(BOX_CANDIDATES) {
                let b = coarse.cell(k);
                let found = if reverse {
                    reverse_box(density, sample, &b, mass, n)
                } else {
                    forward_box(density, sample, &b, mass, n, diam)
                };
                if let Some((r, nu_n_mass, nu_enlarged_mass)) = found {
                    if r > best.r {
                        *best = LowerBoundCertificate {
                            r,
                            witness_cells: Vec::new(),
                            witness_box: Some(b),
                            nu_n_mass,
                            nu_enlarged_mass,
                            reverse,
                            mesh_exponent: l,
                        };
                    }
                }
            }
        }
    }
}

/// Largest `r` (to bisection accuracy) with `nu(b grown by r) < nu_n(b)`.
fn forward_box(density: &Density, sample: &EmpiricalMeasure, b: &Aabb, mass: f64, n: f64, diam: f64) -> Option<(f64, f64, f64)> {
    let a = sample.count_in(b) as f64 / n;
    let a = a - MASS_MARGIN;
    let grown = |r: f64| density.measure_of_box(&b.enlarged(r)) / mass;
    if grown(0.0) >= a {
        return None;
    }
    let (mut lo, mut hi) = (0.0, diam);
    if grown(hi) < a {
        lo = hi;
    }
    for _ in 0..60 {
        if hi - lo <= 1e-12 * diam {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if grown(mid) < a {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo > 0.0).then(|| (lo, a + MASS_MARGIN, grown(lo)))
}

/// Largest `r` with `nu_n(b^r) < nu(b)`, counting points within Euclidean
/// distance `r` of `b`.
fn reverse_box(density: &Density, sample: &EmpiricalMeasure, b: &Aabb, mass: f64, n: f64) -> Option<(f64, f64, f64)> {
    let a = density.measure_of_box(b) / mass;
    if a <= MASS_MARGIN {
        return None;
    }
    // At most `allowed` points may lie in `b^r`.
    let allowed = ((a - MASS_MARGIN) * n).ceil() as usize - 1;
    let mut dist: Vec<f64> = sample.points.iter().map(|p| b.distance_to(p)).collect();
    if allowed >= dist.len() {
        return None;
    }
    let (_, &mut next, _) = dist.select_nth_unstable_by(allowed, f64::total_cmp);
    if next <= 0.0 {
        return None;
    }
    let r = f64::from_bits(next.to_bits() - 1);
    let inside = sample.points.iter().filter(|p| b.distance_to(p) <= r).count() as f64 / n;
    (inside + MASS_MARGIN < a).then_some((r, inside, a))
}

/// Greedy search over unions of mesh cells on the domain's bounding box and
/// radii from a geometric schedule; returns the best certificate found, or
/// `r = 0` when none exists.
pub fn lower_bound_certificate(density: &Density, sample: &EmpiricalMeasure, l: u32) -> Result<LowerBoundCertificate> {
    if l > MAX_CERT_MESH {
        return Err(Error::MeshCap(l));
    }
    let d = density.dim();
    if sample.dim() != d {
        return Err(Error::Dimension { expected: d, got: sample.dim() });
    }
    let mesh = Mesh { bx: density.domain().bounding_box(), m: 1 << l, d };
    let cells = mesh.len();
    let nu: Vec<f64> = (0..cells).map(|k| density.measure_of_box(&mesh.cell(k)) / density.mass()).collect();
    let mut emp = vec![0.0f64; cells];
    let w = sample.weight();
    for p in &sample.points {
        if let Some(k) = mesh.locate(p) {
            emp[k] += w;
        }
    }
    let h: Vec<f64> = (0..d).map(|a| mesh.bx.side(a) / mesh.m as f64).collect();
    let hmin = h.iter().cloned().fold(f64::INFINITY, f64::min);
    let diam = mesh.bx.diameter();
    let mut radii = Vec::new();
    let mut r = hmin;
    while r < diam {
        radii.push(r);
        r *= 2f64.powf(0.125);
    }
    // One extra cell keeps points on cell faces inside the grown set.
    let steps = |r: f64| -> Vec<usize> { h.iter().map(|&ha| (r / ha).floor() as usize + 1).collect() };
    let mut best = LowerBoundCertificate {
        r: 0.0,
        witness_cells: Vec::new(),
        witness_box: None,
        nu_n_mass: 0.0,
        nu_enlarged_mass: 0.0,
        reverse: false,
        mesh_exponent: l,
    };
    for reverse in [false, true] {
        // `inner` is the measure of A, `outer` the measure of A^r.
        let (inner, outer) = if reverse { (&nu, &emp) } else { (&emp, &nu) };
        let mut order: Vec<usize> = (0..cells).filter(|&k| inner[k] > outer[k]).collect();
        order.sort_by(|&a, &b| (inner[b] - outer[b]).total_cmp(&(inner[a] - outer[a])).then(a.cmp(&b)));
        let mut sizes: Vec<usize> = (0..).map(|e| 1usize << e).take_while(|&s| s < order.len()).collect();
        sizes.push(order.len());
        for size in sizes.into_iter().filter(|&s| s > 0) {
            let mut mask = vec![false; cells];
            for &k in &order[..size] {
                mask[k] = true;
            }
            let a_in: f64 = order[..size].iter().map(|&k| inner[k]).sum();
            let holds = |r: f64| -> (bool, f64) {
                let grown = mesh.dilate(&mask, &steps(r));
                let m_out: f64 = (0..cells).filter(|&k| grown[k]).map(|k| outer[k]).sum();
                (a_in > m_out + MASS_MARGIN, m_out)
            };
            // Largest schedule radius beyond the current best that holds;
            // the predicate is monotone in r.
            let start = radii.partition_point(|&x| x <= best.r);
            if start == radii.len() || !holds(radii[start]).0 {
                continue;
            }
            let (mut lo, mut hi) = (start, radii.len());
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if holds(radii[mid]).0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (_, m_out) = holds(radii[lo]);
            let (nu_n_mass, nu_enlarged_mass) = if reverse { (m_out, a_in) } else { (a_in, m_out) };
            best = LowerBoundCertificate {
                r: radii[lo],
                witness_cells: order[..size].iter().map(|&k| mesh.unflatten(k)).collect(),
                witness_box: None,
                nu_n_mass,
                nu_enlarged_mass,
                reverse,
                mesh_exponent: l,
            };
        }
    }
    box_witnesses(density, sample, &mesh, &nu, &emp, &mut best);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxUnionDomain;
    use crate::matching::{bottleneck_match, BipartiteInstance};
    use crate::multiscale::cutoff_depth;
    use crate::sampling::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn formulas() {
        let c = chernoff(100, 0.3, 0.1).unwrap();
        assert!((c.bound - 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        let b = bernstein(100, 0.3, 0.1).unwrap();
        let e: f64 = -(0.5 * 100.0 * 0.01) / (0.21 + 0.1 / 3.0);
        assert!((b.bound - 2.0 * e.exp()).abs() <= 1e-14 * b.bound);
        assert!(chernoff(10, 0.5, 100.0).unwrap().bound < 1e-300);
        assert!(chernoff(0, 0.5, 0.1).is_err());
        assert!(bernstein(10, 1.5, 0.1).is_err());
    }

    #[test]
    fn bernstein_replays_the_level_union_bound() {
        let alpha = 3.0;
        for e in 10..=20 {
            let n = 1u64 << e;
            let k = cutoff_depth(n as usize, alpha, 10.0);
            let p = (-(k as f64)).exp2();
            let b = bernstein(n, p, 0.5 * p).unwrap();
            assert!(b.bound <= 2.0 * (n as f64).powf(-alpha), "n = 2^{e}");
        }
    }

    #[test]
    fn chernoff_dominates_binomial_frequencies() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let (m, p, t) = (50u64, 0.3, 0.1);
        let draws = 10_000;
        let mut bad = 0;
        for _ in 0..draws {
            let s = (0..m).filter(|_| rng.gen::<f64>() < p).count() as f64;
            if (s / m as f64 - p).abs() >= t {
                bad += 1;
            }
        }
        assert!(bad as f64 / draws as f64 <= chernoff(m, p, t).unwrap().bound);
    }

    #[test]
    fn corner_point_is_certified_far() {
        let rho = Density::uniform(BoxUnionDomain::unit(2), 1.0).unwrap();
        let s = EmpiricalMeasure::from_points(vec![vec![0.0, 0.0]]).unwrap();
        let c = lower_bound_certificate(&rho, &s, 5).unwrap();
        assert!(c.r >= 0.4, "{}", c.r);
        assert!(c.r < std::f64::consts::SQRT_2);
        assert_eq!(c.nu_n_mass > c.nu_enlarged_mass, !c.reverse);
    }

    #[test]
    fn quantile_grid_gives_small_certificate() {
        let rho = Density::uniform(BoxUnionDomain::unit(2), 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..32).flat_map(|i| (0..32).map(move |j| vec![(i as f64 + 0.5) / 32.0, (j as f64 + 0.5) / 32.0])).collect();
        let s = EmpiricalMeasure::from_points(pts.clone()).unwrap();
        let c = lower_bound_certificate(&rho, &s, 5).unwrap();
        assert_eq!(c.r, 0.0);
        let c = lower_bound_certificate(&rho, &s, 7).unwrap();
        // Each point is within half a diagonal of a 1/32 cell of its mass.
        assert!(c.r <= 0.5 * std::f64::consts::SQRT_2 / 32.0 + 1e-12, "{}", c.r);
    }

    #[test]
    fn certificate_below_matching_radius() {
        let rho = Density::uniform(BoxUnionDomain::unit(2), 1.0).unwrap();
        for seed in 0..5 {
            let s = sample(&rho, 256, seed).unwrap();
            let grid: Vec<Vec<f64>> = (0..16).flat_map(|i| (0..16).map(move |j| vec![(i as f64 + 0.5) / 16.0, (j as f64 + 0.5) / 16.0])).collect();
            let c = lower_bound_certificate(&rho, &s, 6).unwrap();
            assert!(c.r > 0.0);
            // Matching the sample to a quantile grid costs at least the
            // distance to nu minus the grid's own distance to nu.
            let m = bottleneck_match(&BipartiteInstance::points(s.points.clone(), grid)).unwrap();
            assert!(c.r <= m.bottleneck_radius + 0.5 * std::f64::consts::SQRT_2 / 16.0);
        }
    }

    #[test]
    fn empty_half_is_certified_far() {
        let rho = Density::uniform(BoxUnionDomain::unit(2), 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..8).flat_map(|i| (0..8).map(move |j| vec![(i as f64 + 0.5) / 16.0, (j as f64 + 0.5) / 8.0])).collect();
        let s = EmpiricalMeasure::from_points(pts).unwrap();
        let c = lower_bound_certificate(&rho, &s, 5).unwrap();
        // Mass near x = 1 has to travel to x <= 15/32.
        assert!(c.r >= 0.45 && c.r < 0.55, "{}", c.r);
        assert_eq!(c.nu_n_mass > c.nu_enlarged_mass, !c.reverse);
    }

    #[test]
    fn rounding_in_total_mass_certifies_nothing() {
        // Cell masses of this ring of thirds sum to slightly below one.
        let boxes = (0..9)
            .filter(|&k| k != 4)
            .map(|k| {
                let (i, j) = ((k / 3) as f64, (k % 3) as f64);
                Aabb::new(vec![i / 3.0, j / 3.0], vec![(i + 1.0) / 3.0, (j + 1.0) / 3.0]).unwrap()
            })
            .collect();
        let rho = Density::uniform(BoxUnionDomain::new(boxes).unwrap(), 2.0).unwrap();
        let s = sample(&rho, 4096, 1).unwrap();
        let c = lower_bound_certificate(&rho, &s, 7).unwrap();
        assert!(c.r < 0.3, "{}", c.r);
    }

    #[test]
    fn mesh_cap() {
        let rho = Density::uniform(BoxUnionDomain::unit(2), 1.0).unwrap();
        let s = EmpiricalMeasure::from_points(vec![vec![0.5, 0.5]]).unwrap();
        assert!(matches!(lower_bound_certificate(&rho, &s, 8), Err(Error::MeshCap(8))));
    }
}
