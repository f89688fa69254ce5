//! Monotone CDF transport on a segment.
//!
//! For piecewise-constant source and target densities the monotone map
//! `T = H^{-1} o F` is piecewise affine, so it is built exactly by walking
//! both densities in the mass coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on equality of total masses.
pub const MASS_RTOL: f64 = 1e-12;

/// Piecewise-constant density on `[t_0, t_m]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstantDensity1D {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstantDensity1D {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() != values.len() + 1 || values.is_empty() {
            return Err(Error::InvalidDensity(format!(
                "{} breakpoints for {} pieces",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidDensity("breakpoints must be strictly increasing".into()));
        }
        if let Some(&v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeDensity(v));
        }
        let d = Self { breakpoints, values };
        if !(d.mass() > 0.0) {
            return Err(Error::InvalidDensity("total mass must be positive".into()));
        }
        Ok(d)
    }

    pub fn uniform(lo: f64, hi: f64, value: f64) -> Result<Self> {
        Self::new(vec![lo, hi], vec![value])
    }

    /// `c1` on the lower half of `[lo, hi]`, `c2` on the upper half.
    pub fn two_valued(lo: f64, hi: f64, c1: f64, c2: f64) -> Result<Self> {
        Self::new(vec![lo, 0.5 * (lo + hi), hi], vec![c1, c2])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lo(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn hi(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn piece_mass(&self, i: usize) -> f64 {
        self.values[i] * (self.breakpoints[i + 1] - self.breakpoints[i])
    }

    pub fn mass(&self) -> f64 {
        (0..self.values.len()).map(|i| self.piece_mass(i)).sum()
    }

    /// CDF `H(t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.values.len() {
            let (a, b) = (self.breakpoints[i], self.breakpoints[i + 1]);
            if t <= a {
                break;
            }
            acc += self.values[i] * (t.min(b) - a);
        }
        acc
    }

    /// Mass of `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        (self.cdf(b) - self.cdf(a)).max(0.0)
    }

    /// Generalized inverse `inf { t : H(t) >= u }`.
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return self.lo();
        }
        let mut acc = 0.0;
        for i in 0..self.values.len() {
            let m = self.piece_mass(i);
            if m > 0.0 && acc + m >= u {
                let t = self.breakpoints[i] + (u - acc) / self.values[i];
                return t.min(self.breakpoints[i + 1]);
            }
            acc += m;
        }
        self.hi()
    }
}

/// One affine piece `x -> slope * x + intercept` on `[x0, x1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinePiece {
    pub x0: f64,
    pub x1: f64,
    pub slope: f64,
    pub intercept: f64,
}

impl AffinePiece {
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// Image endpoints `(T(x0), T(x1))`.
    pub fn image(&self) -> (f64, f64) {
        (self.eval(self.x0), self.eval(self.x1))
    }
}

/// Nondecreasing piecewise-affine map of a segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMap1D {
    pieces: Vec<AffinePiece>,
}

impl MonotoneMap1D {
    pub fn identity(lo: f64, hi: f64) -> Self {
        Self { pieces: vec![AffinePiece { x0: lo, x1: hi, slope: 1.0, intercept: 0.0 }] }
    }

    /// Map through the given anchor pairs `(x_i, y_i)`, linear in between.
    pub fn interpolating(anchors: &[(f64, f64)]) -> Self {
        let pieces = anchors
            .windows(2)
            .filter(|w| w[1].0 > w[0].0)
            .map(|w| {
                let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                AffinePiece { x0: w[0].0, x1: w[1].0, slope, intercept: w[0].1 - slope * w[0].0 }
            })
            .collect();
        Self { pieces }
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    pub fn lo(&self) -> f64 {
        self.pieces[0].x0
    }

    pub fn hi(&self) -> f64 {
        self.pieces.last().unwrap().x1
    }

    pub fn is_identity(&self) -> bool {
        self.pieces.iter().all(|p| p.slope == 1.0 && p.intercept == 0.0)
    }

    fn piece_index(&self, x: f64) -> usize {
        let idx = self.pieces.partition_point(|p| p.x1 < x);
        idx.min(self.pieces.len() - 1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.pieces[self.piece_index(x)].eval(x)
    }

    /// Exact `sup |T(x) - x|`; `T - Id` is affine on each piece, so the
    /// supremum is attained at piece endpoints.
    pub fn sup_displacement(&self) -> f64 {
        self.pieces
            .iter()
            .map(|p| (p.eval(p.x0) - p.x0).abs().max((p.eval(p.x1) - p.x1).abs()))
            .fold(0.0, f64::max)
    }

    /// Images of the parts of `[a, b]` lying in each piece, as
    /// `(image_lo, image_hi, fraction_of_length)` triples.
    pub fn push_interval(&self, a: f64, b: f64) -> Vec<(f64, f64, f64)> {
        let len = b - a;
        if len <= 0.0 {
            let y = self.eval(a);
            return vec![(y, y, 1.0)];
        }
        let mut out = Vec::new();
        let start = self.piece_index(a);
        for p in &self.pieces[start..] {
            if p.x0 >= b {
                break;
            }
            let lo = a.max(p.x0);
            let hi = b.min(p.x1);
            if hi <= lo {
                continue;
            }
            let (y0, y1) = (p.eval(lo), p.eval(hi));
            out.push((y0.min(y1), y0.max(y1), (hi - lo) / len));
        }
        if out.is_empty() {
            let y = self.eval(a);
            out.push((y, y, 1.0));
        }
        out
    }

    /// Generalized inverse `inf { x : T(x) >= y }`.
    pub fn preimage(&self, y: f64) -> f64 {
        for p in &self.pieces {
            if p.eval(p.x1) >= y {
                if p.slope > 0.0 {
                    return ((y - p.intercept) / p.slope).clamp(p.x0, p.x1);
                }
                return p.x0;
            }
        }
        self.hi()
    }

    /// Inverse of a strictly increasing map.
    pub fn inverse(&self) -> Option<Self> {
        let mut pieces = Vec::with_capacity(self.pieces.len());
        for p in &self.pieces {
            if !(p.slope > 0.0) {
                return None;
            }
            let (y0, y1) = p.image();
            pieces.push(AffinePiece {
                x0: y0,
                x1: y1,
                slope: 1.0 / p.slope,
                intercept: -p.intercept / p.slope,
            });
        }
        Some(Self { pieces })
    }
}

/// Monotone rearrangement pushing `source` onto `target`.
pub fn cdf_transport(
    source: &PiecewiseConstantDensity1D,
    target: &PiecewiseConstantDensity1D,
) -> Result<MonotoneMap1D> {
    let (ms, mt) = (source.mass(), target.mass());
    if (ms - mt).abs() > MASS_RTOL * ms.max(mt) {
        return Err(Error::UnequalMasses(ms, mt));
    }
    if source == target {
        return Ok(MonotoneMap1D::identity(source.lo(), source.hi()));
    }
    // Work in normalized mass so tiny mass mismatches do not accumulate.
    let sv: Vec<f64> = source.values.iter().map(|v| v / ms).collect();
    let tv: Vec<f64> = target.values.iter().map(|v| v / mt).collect();
    let sb = &source.breakpoints;
    let tb = &target.breakpoints;
    let ns = sv.len();
    let nt = tv.len();

    let mut pieces = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let mut x = sb[0];
    let mut rem_s = sv[0] * (sb[1] - sb[0]);
    let mut y = tb[0];
    let mut rem_t = tv[0] * (tb[1] - tb[0]);
    const EPS: f64 = 1e-15;

    while i < ns {
        if sv[i] == 0.0 || rem_s <= EPS {
            // Zero-mass source piece collapses onto the current target point.
            if sb[i + 1] > x {
                pieces.push(AffinePiece { x0: x, x1: sb[i + 1], slope: 0.0, intercept: y });
            }
            i += 1;
            if i < ns {
                x = sb[i];
                rem_s = sv[i] * (sb[i + 1] - sb[i]);
            }
            continue;
        }
        // Skip exhausted or empty target pieces (generalized inverse).
        while j < nt && (tv[j] == 0.0 || rem_t <= EPS) {
            j += 1;
            if j < nt {
                y = tb[j];
                rem_t = tv[j] * (tb[j + 1] - tb[j]);
            }
        }
        if j >= nt {
            // Only rounding residue remains: pin the rest to the target end.
            let yend = tb[nt];
            pieces.push(AffinePiece { x0: x, x1: sb[ns], slope: 0.0, intercept: yend });
            break;
        }
        let slope = sv[i] / tv[j];
        let finish_s = rem_s <= rem_t * (1.0 + 1e-13);
        let finish_t = rem_t <= rem_s * (1.0 + 1e-13);
        let (x1, y1) = match (finish_s, finish_t) {
            (true, true) => (sb[i + 1], tb[j + 1]),
            (true, false) => (sb[i + 1], y + rem_s / tv[j]),
            (false, true) => (x + rem_t / sv[i], tb[j + 1]),
            (false, false) => unreachable!(),
        };
        let x1 = x1.min(sb[i + 1]);
        let y1 = y1.min(tb[j + 1]);
        if x1 > x {
            // Anchor both ends exactly; the slope is recomputed from them.
            let s = if y1 > y { (y1 - y) / (x1 - x) } else { slope.min(0.0).max(0.0) };
            pieces.push(AffinePiece { x0: x, x1, slope: s, intercept: y - s * x });
        }
        let moved = if finish_s { rem_s } else { rem_t };
        if finish_s {
            i += 1;
            if i < ns {
                x = sb[i];
                rem_s = sv[i] * (sb[i + 1] - sb[i]);
            }
        } else {
            x = x1;
            rem_s -= moved;
        }
        if finish_t {
            y = tb[j + 1];
            j += 1;
            if j < nt {
                rem_t = tv[j] * (tb[j + 1] - tb[j]);
            }
        } else {
            y = y1;
            rem_t -= moved;
        }
    }
    Ok(MonotoneMap1D { pieces })
}

/// Displacement bound `(L/2) |c1 - 1|` of the two-valued rectangle lemma.
pub fn displacement_bound_two_valued(side: f64, c1: f64) -> f64 {
    0.5 * side * (c1 - 1.0).abs()
}
