//! Seeded rejection sampling and empirical measures.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::geometry::Aabb;

/// Identifier of the generator and proposal scheme stored with every sample.
pub const SAMPLER_ID: &str = "chacha20-rejection/v1";

/// Uniform atomic measure on `points`, each of weight `1/n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub points: Vec<Vec<f64>>,
    pub seed: u64,
    pub sampler_id: String,
}

impl EmpiricalMeasure {
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("empirical measure needs at least one point".into()));
        }
        Ok(Self { points, seed: 0, sampler_id: "explicit".into() })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.n() as f64
    }

    /// Number of points in the closed box `q`.
    pub fn count_in(&self, q: &Aabb) -> usize {
        self.points.iter().filter(|p| q.contains(p)).count()
    }

    /// `nu_n(q)` for the closed box `q`.
    pub fn mass_in(&self, q: &Aabb) -> f64 {
        self.count_in(q) as f64 / self.n() as f64
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `n` i.i.d. draws from `density`, bit-reproducible for a given seed.
///
/// A domain box is proposed with probability proportional to its volume,
/// a uniform point inside it, and the point is kept with probability
/// `rho(x) / (lambda * mass)`.
pub fn sample(density: &Density, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let boxes = density.domain().boxes();
    let total: f64 = boxes.iter().map(Aabb::volume).sum();
    let cumulative: Vec<f64> = boxes
        .iter()
        .scan(0.0, |acc, b| {
            *acc += b.volume() / total;
            Some(*acc)
        })
        .collect();
    let envelope = density.lambda() * density.mass();
    let d = density.dim();
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let u: f64 = rng.gen();
        let k = cumulative.partition_point(|&c| c <= u).min(boxes.len() - 1);
        let b = &boxes[k];
        let x: Vec<f64> = (0..d).map(|i| b.lo[i] + rng.gen::<f64>() * b.side(i)).collect();
        if rng.gen::<f64>() * envelope < density.value(&x) {
            points.push(x);
        }
    }
    Ok(EmpiricalMeasure { points, seed, sampler_id: SAMPLER_ID.into() })
}
