//! Bounded densities on box-union domains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{bisect_mass, CellField, MassOracle};
use crate::geometry::{Aabb, BoxUnionDomain};

const BOUND_RTOL: f64 = 1e-12;
const QUAD_RTOL: f64 = 1e-10;

/// Smooth separable preset `1 + A * prod_i sin(2 pi k x_i)`, bounded away from
/// zero because `|A| < 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinePreset {
    pub amplitude: f64,
    pub frequency: u32,
}

impl SinePreset {
    fn raw(&self, x: &[f64]) -> f64 {
        let k = std::f64::consts::TAU * self.frequency as f64;
        1.0 + self.amplitude * x.iter().map(|&t| (k * t).sin()).product::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DensityKind {
    Uniform,
    /// Cell values on a uniform grid over the domain's bounding box.
    Grid { cells: Vec<usize>, values: Vec<f64> },
    Analytic(SinePreset),
    /// Arbitrary per-box piecewise-constant fields.
    Fields,
}

/// Density `rho` with `1/lambda <= rho / mass <= lambda`, stored with total
/// mass `mass` (1 unless rescaled).
#[derive(Clone, Debug)]
pub struct Density {
    domain: BoxUnionDomain,
    kind: DensityKind,
    lambda: f64,
    /// Multiplier turning the raw kind values into a unit-mass density.
    scale: f64,
    mass: f64,
    /// Per-domain-box fields of the density (not for analytic presets).
    fields: Option<Vec<CellField>>,
}

impl Density {
    pub fn uniform(domain: BoxUnionDomain, lambda: f64) -> Result<Self> {
        Self::build(domain, DensityKind::Uniform, lambda)
    }

    pub fn grid(domain: BoxUnionDomain, cells: Vec<usize>, values: Vec<f64>, lambda: f64) -> Result<Self> {
        Self::build(domain, DensityKind::Grid { cells, values }, lambda)
    }

    pub fn analytic(domain: BoxUnionDomain, preset: SinePreset, lambda: f64) -> Result<Self> {
        if !(preset.amplitude.abs() < 1.0) || preset.frequency == 0 {
            return Err(Error::InvalidDensity("preset needs |amplitude| < 1 and frequency >= 1".into()));
        }
        Self::build(domain, DensityKind::Analytic(preset), lambda)
    }

    /// Unit-mass density with the given per-box fields (values are
    /// normalized here).
    pub fn from_fields(domain: BoxUnionDomain, fields: Vec<CellField>, lambda: f64) -> Result<Self> {
        if fields.len() != domain.boxes().len() {
            return Err(Error::InvalidDensity("one field per domain box expected".into()));
        }
        let raw: f64 = fields.iter().map(CellField::mass).sum();
        if !(raw > 0.0) {
            return Err(Error::InvalidDensity("zero total mass".into()));
        }
        let fields: Vec<CellField> = fields.iter().map(|f| f.scaled(1.0 / raw)).collect();
        let d = Self {
            domain,
            kind: DensityKind::Fields,
            lambda,
            scale: 1.0 / raw,
            mass: 1.0,
            fields: Some(fields),
        };
        d.check_lambda(d.fields.as_ref().unwrap().iter().flat_map(|f| f.values().iter().copied()))?;
        Ok(d)
    }

    fn build(domain: BoxUnionDomain, kind: DensityKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 1.0) {
            return Err(Error::Config(format!("lambda must be >= 1, got {lambda}")));
        }
        let mut d = Self { domain, kind, lambda, scale: 1.0, mass: 1.0, fields: None };
        match &d.kind {
            DensityKind::Uniform => {
                let v = 1.0 / d.domain.volume();
                d.fields = Some(d.domain.boxes().iter().map(|b| CellField::constant(b.clone(), v)).collect());
                d.scale = v;
                d.check_lambda(std::iter::once(v))?;
            }
            DensityKind::Grid { cells, values } => {
                let bb = d.domain.bounding_box();
                if cells.len() != bb.dim() {
                    return Err(Error::Dimension { expected: bb.dim(), got: cells.len() });
                }
                let whole = CellField::uniform_grid(bb, cells, values.clone())?;
                let parts: Vec<CellField> =
                    d.domain.boxes().iter().map(|b| whole.restrict(b)).collect::<Result<_>>()?;
                let raw: f64 = parts.iter().map(CellField::mass).sum();
                if !(raw > 0.0) {
                    return Err(Error::InvalidDensity("zero total mass".into()));
                }
                d.scale = 1.0 / raw;
                let parts: Vec<CellField> = parts.iter().map(|f| f.scaled(d.scale)).collect();
                d.check_lambda(parts.iter().flat_map(|f| f.values().iter().copied()))?;
                d.fields = Some(parts);
            }
            DensityKind::Fields => unreachable!("built by from_fields"),
            DensityKind::Analytic(p) => {
                let raw: f64 = d.domain.boxes().iter().map(|b| integrate(|x| p.raw(x), b)).sum();
                d.scale = 1.0 / raw;
                let a = p.amplitude.abs();
                d.check_lambda([(1.0 - a) * d.scale, (1.0 + a) * d.scale].into_iter())?;
            }
        }
        Ok(d)
    }

    fn check_lambda(&self, values: impl Iterator<Item = f64>) -> Result<()> {
        let lo = 1.0 / self.lambda * (1.0 - BOUND_RTOL);
        let hi = self.lambda * (1.0 + BOUND_RTOL);
        for v in values {
            if !(v >= lo && v <= hi) {
                return Err(Error::DensityOutOfBounds { value: v, lambda: self.lambda });
            }
        }
        Ok(())
    }

    /// Same density carrying total mass `mass`.
    pub fn with_mass(&self, mass: f64) -> Self {
        let mut d = self.clone();
        let c = mass / self.mass;
        d.mass = mass;
        d.fields = d.fields.map(|fs| fs.iter().map(|f| f.scaled(c)).collect());
        d
    }

    pub fn domain(&self) -> &BoxUnionDomain {
        &self.domain
    }

    pub fn kind(&self) -> &DensityKind {
        &self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Per-domain-box piecewise-constant fields. Analytic presets must be
    /// discretized first.
    pub fn fields(&self) -> Result<&[CellField]> {
        self.fields
            .as_deref()
            .ok_or_else(|| Error::Unsupported("analytic density: discretize before transport".into()))
    }

    /// Largest density value (used as the rejection envelope).
    pub fn sup(&self) -> f64 {
        match (&self.fields, &self.kind) {
            (Some(fs), _) => fs.iter().map(CellField::max_value).fold(0.0, f64::max),
            (None, DensityKind::Analytic(p)) => (1.0 + p.amplitude.abs()) * self.scale * self.mass,
            _ => unreachable!("non-analytic densities carry fields"),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let Some(i) = self.domain.locate(x) else { return 0.0 };
        match (&self.fields, &self.kind) {
            (Some(fs), _) => fs[i].eval(x),
            (None, DensityKind::Analytic(p)) => p.raw(x) * self.scale * self.mass,
            _ => unreachable!("non-analytic densities carry fields"),
        }
    }

    /// Mass of `q` intersected with the domain.
    pub fn measure_of_box(&self, q: &Aabb) -> f64 {
        match (&self.fields, &self.kind) {
            (Some(fs), _) => fs.iter().map(|f| f.mass_in(q)).sum(),
            (None, DensityKind::Analytic(p)) => {
                let c = self.scale * self.mass;
                self.domain
                    .boxes()
                    .iter()
                    .filter_map(|b| b.intersection(q).filter(|i| !i.is_degenerate()))
                    .map(|i| c * integrate(|x| p.raw(x), &i))
                    .sum()
            }
            _ => unreachable!("non-analytic densities carry fields"),
        }
    }

    /// Piecewise-constant approximation by cell averages on a uniform grid
    /// over the bounding box.
    pub fn discretize(&self, cells: &[usize]) -> Result<Self> {
        if self.fields.is_some() {
            return Ok(self.clone());
        }
        let bb = self.domain.bounding_box();
        let probe = CellField::uniform_grid(bb, cells, vec![0.0; cells.iter().product()])?;
        let values = (0..probe.cell_count())
            .map(|k| {
                let c = probe.cell_box(k);
                let covered: f64 = self.domain.boxes().iter().map(|b| b.overlap_volume(&c)).sum();
                if covered > 0.0 {
                    self.measure_of_box(&c) / covered
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self::grid(self.domain.clone(), cells.to_vec(), values, self.lambda)?.with_mass(self.mass))
    }

    pub fn from_config(cfg: &DensityConfig) -> Result<Self> {
        let boxes = cfg
            .domain
            .iter()
            .map(|[lo, hi]| Aabb::new(lo.clone(), hi.clone()))
            .collect::<Result<Vec<_>>>()?;
        let domain = BoxUnionDomain::new(boxes)?;
        let lambda = cfg.lambda;
        match cfg.kind.as_str() {
            "uniform" => Self::uniform(domain, lambda),
            "grid" => {
                let cells = cfg.grid.clone().ok_or_else(|| Error::Config("grid density needs `grid`".into()))?;
                let values =
                    cfg.values.clone().ok_or_else(|| Error::Config("grid density needs `values`".into()))?;
                Self::grid(domain, cells, values, lambda)
            }
            "analytic" => Self::analytic(
                domain,
                SinePreset {
                    amplitude: cfg.amplitude.unwrap_or(0.5),
                    frequency: cfg.frequency.unwrap_or(1),
                },
                lambda,
            ),
            other => Err(Error::Config(format!("unknown density kind `{other}`"))),
        }
    }
}

impl MassOracle for Density {
    fn mass_in(&self, q: &Aabb) -> f64 {
        self.measure_of_box(q)
    }

    fn split_at_mass(&self, q: &Aabb, axis: usize, target: f64) -> Result<f64> {
        if let Some(fs) = &self.fields {
            if let Some(f) = fs.iter().find(|f| f.bbox().contains_box(q)) {
                return f.split_at_mass(q, axis, target);
            }
        }
        bisect_mass(self, q, axis, target)
    }

    fn split_at_fraction(&self, q: &Aabb, axis: usize, frac: f64) -> Result<f64> {
        if let Some(fs) = &self.fields {
            if let Some(f) = fs.iter().find(|f| f.bbox().contains_box(q)) {
                return f.split_at_fraction(q, axis, frac);
            }
        }
        self.split_at_mass(q, axis, frac * self.mass_in(q))
    }
}

/// JSON form of a density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub domain: Vec<[Vec<f64>; 2]>,
    pub kind: String,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<u32>,
}

/// Two boxes forming an L: `[0,1]x[0,1/2]` and `[0,1/2]x[1/2,1]`.
pub fn l_shape() -> BoxUnionDomain {
    BoxUnionDomain::new(vec![
        Aabb::new(vec![0.0, 0.0], vec![1.0, 0.5]).unwrap(),
        Aabb::new(vec![0.0, 0.5], vec![0.5, 1.0]).unwrap(),
    ])
    .expect("L-shape is a valid domain")
}

/// Eight `1/4`-boxes forming a 3x3 ring around an empty centre.
pub fn ring() -> BoxUnionDomain {
    let mut boxes = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            if i == 1 && j == 1 {
                continue;
            }
            let (x, y) = (0.25 * i as f64, 0.25 * j as f64);
            boxes.push(Aabb::new(vec![x, y], vec![x + 0.25, y + 0.25]).unwrap());
        }
    }
    BoxUnionDomain::new(boxes).expect("ring is a valid domain")
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Tensor composite 5-point Gauss-Legendre rule with `m` panels per axis.
fn gauss_legendre(f: &impl Fn(&[f64]) -> f64, b: &Aabb, m: usize) -> f64 {
    let d = b.dim();
    let per_axis: Vec<Vec<(f64, f64)>> = (0..d)
        .map(|a| {
            let h = b.side(a) / m as f64;
            let mut pts = Vec::with_capacity(m * 5);
            for p in 0..m {
                let mid = b.lo[a] + h * (p as f64 + 0.5);
                for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
                    pts.push((mid + 0.5 * h * x, 0.5 * h * w));
                }
            }
            pts
        })
        .collect();
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for a in 0..d {
            let (p, wa) = per_axis[a][idx[a]];
            x[a] = p;
            w *= wa;
        }
        total += w * f(&x);
        let mut a = d;
        loop {
            if a == 0 {
                return total;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < per_axis[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Integrates with dyadic panel refinement until the relative change drops
/// below `1e-10`.
pub fn integrate(f: impl Fn(&[f64]) -> f64, b: &Aabb) -> f64 {
    let mut m = 1;
    let mut prev = gauss_legendre(&f, b, m);
    let cap = if b.dim() <= 2 { 256 } else { 32 };
    loop {
        m *= 2;
        let cur = gauss_legendre(&f, b, m);
        if (cur - prev).abs() <= QUAD_RTOL * cur.abs().max(f64::MIN_POSITIVE) || m >= cap {
            return cur;
        }
        prev = cur;
    }
}
