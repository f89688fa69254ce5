//! Push-forward audits: `T#nu(Q)` against the target mass of probe boxes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::Result;
use crate::geometry::{Aabb, BoxUnionDomain};
use crate::sampling::{sample, EmpiricalMeasure};
use crate::stage::{fragments_of, mass_in, ComposedTransport, Frag};

/// Target measure of an audit.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Empirical(&'a EmpiricalMeasure),
    Density(&'a Density),
}

impl Target<'_> {
    fn mass_in(&self, q: &Aabb) -> f64 {
        match self {
            Target::Empirical(e) => e.mass_in(q),
            Target::Density(d) => d.measure_of_box(q),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub bx: Aabb,
    /// Pushed-forward source mass in the box.
    pub mass_in: f64,
    /// Target mass in the box.
    pub mass_out: f64,
}

/// Per-probe masses of an audit plus the mass the map sent off the domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MassLedger {
    pub entries: BTreeMap<usize, LedgerEntry>,
    /// Source mass whose image left the domain.
    pub out_of_domain: f64,
}

impl MassLedger {
    pub fn total_in(&self) -> f64 {
        self.entries.values().map(|e| e.mass_in).sum()
    }

    pub fn total_out(&self) -> f64 {
        self.entries.values().map(|e| e.mass_out).sum()
    }

    pub fn max_abs_error(&self) -> f64 {
        self.entries.values().map(|e| (e.mass_in - e.mass_out).abs()).fold(0.0, f64::max)
    }

    /// Largest `|in - out| / max(out, floor)`.
    pub fn max_rel_error(&self, floor: f64) -> f64 {
        self.entries
            .values()
            .map(|e| (e.mass_in - e.mass_out).abs() / e.mass_out.max(floor))
            .fold(0.0, f64::max)
    }

    /// Whether some image fell outside the domain.
    pub fn flagged(&self) -> bool {
        self.out_of_domain > 0.0
    }

    pub fn balanced(&self, tol: f64) -> bool {
        !self.flagged() && self.max_abs_error() <= tol
    }
}

fn outside_mass(frags: &[Frag], domain: &BoxUnionDomain) -> f64 {
    frags
        .iter()
        .map(|f| {
            let inside: f64 = domain.boxes().iter().map(|b| f.fraction_in(b)).sum();
            f.mass * (1.0 - inside.min(1.0))
        })
        .filter(|&m| m > 1e-15)
        .sum()
}

/// Exact audit of a composed transport applied to `source`.
pub fn pushforward_check(
    transport: &ComposedTransport,
    source: &Density,
    target: Target<'_>,
    probes: &[Aabb],
) -> Result<MassLedger> {
    let out = transport.pushforward(fragments_of(source.fields()?));
    let entries = probes
        .iter()
        .enumerate()
        .map(|(i, q)| (i, LedgerEntry { bx: q.clone(), mass_in: mass_in(&out, q), mass_out: target.mass_in(q) }))
        .collect();
    Ok(MassLedger { entries, out_of_domain: outside_mass(&out, source.domain()) })
}

/// Monte Carlo audit of an arbitrary map with `draws` source samples.
pub fn pushforward_check_mc(
    map: impl Fn(&[f64]) -> Vec<f64>,
    source: &Density,
    target: Target<'_>,
    probes: &[Aabb],
    draws: usize,
    seed: u64,
) -> Result<MassLedger> {
    let pts = sample(source, draws, seed)?;
    let w = source.mass() / draws as f64;
    let mut counts = vec![0usize; probes.len()];
    let mut outside = 0usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in &pts.points {
        let y = map(p);
        if !source.domain().contains(&y) {
            outside += 1;
        }
        // Points on shared faces go to one probe chosen uniformly.
        let hits: Vec<usize> = (0..probes.len()).filter(|&i| probes[i].contains(&y)).collect();
        if !hits.is_empty() {
            counts[hits[rng.gen_range(0..hits.len())]] += 1;
        }
    }
    let entries = probes
        .iter()
        .enumerate()
        .map(|(i, q)| (i, LedgerEntry { bx: q.clone(), mass_in: counts[i] as f64 * w, mass_out: target.mass_in(q) }))
        .collect();
    Ok(MassLedger { entries, out_of_domain: outside as f64 * w })
}

/// `m^d` congruent probe boxes tiling `bx`.
pub fn probe_grid(bx: &Aabb, m: usize) -> Vec<Aabb> {
    let d = bx.dim();
    (0..m.pow(d as u32))
        .map(|k| {
            let mut lo = Vec::with_capacity(d);
            let mut hi = Vec::with_capacity(d);
            for a in 0..d {
                let i = (k / m.pow((d - 1 - a) as u32)) % m;
                let s = bx.side(a) / m as f64;
                lo.push(bx.lo[a] + i as f64 * s);
                hi.push(if i + 1 == m { bx.hi[a] } else { bx.lo[a] + (i + 1) as f64 * s });
            }
            Aabb::closed(lo, hi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::{AxisStage, Stage};
    use crate::transport1d::MonotoneMap1D;

    fn unit() -> Density {
        Density::uniform(BoxUnionDomain::unit(2), 1.0).unwrap()
    }

    #[test]
    fn identity_balances_exactly() {
        let d = Density::grid(BoxUnionDomain::unit(2), vec![2, 2], vec![1.0, 1.2, 0.8, 1.0], 2.0).unwrap();
        let ledger = pushforward_check(&ComposedTransport::identity(), &d, Target::Density(&d), &probe_grid(&Aabb::unit(2), 4)).unwrap();
        assert_eq!(ledger.max_abs_error(), 0.0);
        assert!(!ledger.flagged());
        assert!((ledger.total_in() - ledger.total_out()).abs() < 1e-12);
    }

    #[test]
    fn two_valued_map_sends_three_quarters_left() {
        let map = MonotoneMap1D::interpolating(&[(0.0, 0.0), (0.75, 0.5), (1.0, 1.0)]);
        let t = ComposedTransport::from_stages(vec![Stage::axis(AxisStage::new(vec![(Aabb::unit(2), 0, map)]), 0.25)]);
        let tgt = Density::grid(BoxUnionDomain::unit(2), vec![2, 1], vec![1.5, 0.5], 2.0).unwrap();
        let left = Aabb::new(vec![0.0, 0.0], vec![0.5, 1.0]).unwrap();
        let ledger = pushforward_check(&t, &unit(), Target::Density(&tgt), &[left]).unwrap();
        assert!((ledger.entries[&0].mass_in - 0.75).abs() < 1e-15);
        assert!(ledger.balanced(1e-12));
    }

    #[test]
    fn constant_map_to_sample_point() {
        let s = EmpiricalMeasure::from_points(vec![vec![0.3, 0.6]]).unwrap();
        let q = Aabb::new(vec![0.25, 0.5], vec![0.5, 0.75]).unwrap();
        let ledger = pushforward_check_mc(|_| vec![0.3, 0.6], &unit(), Target::Empirical(&s), &[q], 2000, 3).unwrap();
        assert_eq!(ledger.entries[&0].mass_in, 1.0);
        assert_eq!(ledger.entries[&0].mass_out, 1.0);
    }

    #[test]
    fn leaving_the_domain_is_flagged() {
        let ledger = pushforward_check_mc(|x| vec![x[0] + 2.0, x[1]], &unit(), Target::Density(&unit()), &probe_grid(&Aabb::unit(2), 2), 500, 1).unwrap();
        assert!(ledger.flagged());
        assert!((ledger.out_of_domain - 1.0).abs() < 1e-12);
        let shift = MonotoneMap1D::interpolating(&[(0.0, 0.5), (1.0, 1.5)]);
        let t = ComposedTransport::from_stages(vec![Stage::axis(AxisStage::new(vec![(Aabb::unit(2), 0, shift)]), 0.5)]);
        let ledger = pushforward_check(&t, &unit(), Target::Density(&unit()), &[Aabb::unit(2)]).unwrap();
        assert!((ledger.out_of_domain - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probe_grid_tiles_the_box() {
        let g = probe_grid(&Aabb::new(vec![0.0, 1.0, 2.0], vec![1.0, 3.0, 5.0]).unwrap(), 3);
        assert_eq!(g.len(), 27);
        let vol: f64 = g.iter().map(Aabb::volume).sum();
        assert!((vol - 6.0).abs() < 1e-12);
    }
}
