//! Batch experiments: sampling, scheme selection, certified bounds per
//! trial, rate fitting and result files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{lower_bound_certificate, MAX_CERT_MESH};
use crate::density::{Density, DensityConfig, DensityKind};
use crate::error::{Error, Result};
use crate::matching::hall_matching_2d;
use crate::multiscale::{box_field, empirical_coupling_highd, HighdOptions};
use crate::partition::rectangle_partition_n;
use crate::sampling::sample;
use crate::wp::{build_wp, wp_empirical, BaseScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Highd,
    Hall2d,
    Auto,
}

impl Scheme {
    /// `hall2d` in the plane, `highd` otherwise.
    pub fn resolve(self, d: usize) -> Self {
        match self {
            Scheme::Auto if d == 2 => Scheme::Hall2d,
            Scheme::Auto => Scheme::Highd,
            s => s,
        }
    }
}

/// Density given inline or as a path to a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensitySource {
    Path(String),
    Inline(DensityConfig),
}

fn default_alpha() -> f64 {
    3.0
}

fn default_one() -> f64 {
    1.0
}

fn default_kn() -> f64 {
    10.0
}

fn default_true() -> bool {
    true
}

fn default_out() -> String {
    "out".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub density: DensitySource,
    pub scheme: Scheme,
    pub n_schedule: Vec<usize>,
    pub trials: usize,
    /// Explicit per-trial seeds; defaults to `base_seed + t`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_one")]
    pub l_cfg: f64,
    #[serde(default = "default_kn")]
    pub kn_constant: f64,
    /// Mesh exponent of the lower-bound search; chosen from `n` when absent.
    #[serde(default)]
    pub cert_mesh: Option<u32>,
    /// Cells per axis used to discretize analytic densities.
    #[serde(default)]
    pub discretize: Option<Vec<usize>>,
    /// Record wall-clock times; when off `wall_ms` is 0 and output is
    /// byte-reproducible.
    #[serde(default = "default_true")]
    pub timing: bool,
    #[serde(default = "default_out")]
    pub output: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.n_schedule.is_empty() || self.n_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_schedule must be non-empty and strictly increasing".into()));
        }
        if self.n_schedule[0] == 0 {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        if let Some(s) = &self.seeds {
            if s.len() != self.trials {
                return Err(Error::Config(format!("{} seeds given for {} trials", s.len(), self.trials)));
            }
        }
        if !(self.alpha > 0.0 && self.l_cfg > 0.0 && self.kn_constant > 0.0) {
            return Err(Error::Config("alpha, l_cfg and kn_constant must be positive".into()));
        }
        if self.cert_mesh.map_or(false, |l| l > MAX_CERT_MESH) {
            return Err(Error::MeshCap(self.cert_mesh.unwrap()));
        }
        Ok(())
    }

    pub fn seed(&self, t: usize) -> u64 {
        self.seeds.as_ref().map_or(self.base_seed + t as u64, |s| s[t])
    }

    /// Loads a density, resolving relative paths against `base`.
    pub fn load_density(&self, base: &Path) -> Result<Density> {
        let cfg = match &self.density {
            DensitySource::Inline(c) => c.clone(),
            DensitySource::Path(p) => {
                let path = base.join(p);
                let text = fs::read_to_string(&path)?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
        };
        let rho = Density::from_config(&cfg)?;
        if matches!(rho.kind(), DensityKind::Analytic(_)) {
            let d = rho.dim();
            let cells = self.discretize.clone().unwrap_or_else(|| vec![if d <= 2 { 64 } else { 16 }; d]);
            return rho.discretize(&cells);
        }
        Ok(rho)
    }
}

/// Parses a config, reporting line and column on syntax errors.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("{origin}: line {}, column {}: {e}", e.line(), e.column())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub n: usize,
    pub seed: u64,
    pub upper: f64,
    pub lower: f64,
    pub escalated: bool,
    pub wall_ms: u64,
    pub error: Option<String>,
}

/// Sample seed for trial seed `seed` at size `n`.
pub fn sample_seed(seed: u64, n: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (n as u64).rotate_left(32)
}

/// Mesh exponent of the lower-bound search for `n` points in dimension `d`.
pub fn auto_cert_mesh(n: usize, d: usize) -> u32 {
    let bits = (n.max(2) as f64).log2();
    let cap = if d <= 2 { MAX_CERT_MESH } else { (15 / d as u32).min(MAX_CERT_MESH) };
    ((bits / d as f64).ceil() as u32 + 1).clamp(2, cap)
}

/// Certified upper bound and escalation flag for one sample.
pub fn upper_bound(rho: &Density, n: usize, seed: u64, cfg: &ExperimentConfig) -> Result<(f64, bool, crate::sampling::EmpiricalMeasure)> {
    let s = sample(rho, n, seed)?;
    let d = rho.dim();
    let scheme = cfg.scheme.resolve(d);
    if scheme == Scheme::Hall2d && d != 2 {
        return Err(Error::Dimension { expected: 2, got: d });
    }
    let opts = HighdOptions { alpha: cfg.alpha, kn_constant: cfg.kn_constant };
    if rho.domain().boxes().len() > 1 {
        let dec = build_wp(rho.domain())?;
        let base = match scheme {
            Scheme::Hall2d => BaseScheme::Hall2d { l_cfg: cfg.l_cfg },
            _ => BaseScheme::Highd(opts),
        };
        let e = wp_empirical(rho, &s, &dec, base)?;
        return Ok((e.transport.certified_bound(), e.escalated, s));
    }
    let field = box_field(rho)?;
    match scheme {
        Scheme::Hall2d => {
            let part = rectangle_partition_n(rho, field.bbox(), n, rho.lambda())?;
            let h = hall_matching_2d(&s, &part, cfg.l_cfg)?;
            Ok((h.matching.bottleneck_radius, h.escalated, s))
        }
        _ => Ok((empirical_coupling_highd(field, &s, opts)?.transport.certified_bound(), false, s)),
    }
}

fn run_trial(rho: &Density, n: usize, seed: u64, cfg: &ExperimentConfig) -> TrialRecord {
    let start = Instant::now();
    let res = upper_bound(rho, n, sample_seed(seed, n), cfg).and_then(|(upper, escalated, s)| {
        let l = cfg.cert_mesh.unwrap_or_else(|| auto_cert_mesh(n, rho.dim()));
        let lower = lower_bound_certificate(rho, &s, l)?.r;
        Ok((upper, lower, escalated))
    });
    let wall_ms = if cfg.timing { start.elapsed().as_millis() as u64 } else { 0 };
    match res {
        Ok((upper, lower, escalated)) => TrialRecord { n, seed, upper, lower, escalated, wall_ms, error: None },
        Err(e) => TrialRecord {
            n,
            seed,
            upper: f64::NAN,
            lower: f64::NAN,
            escalated: false,
            wall_ms,
            error: Some(e.to_string()),
        },
    }
}

/// Least-squares fit in log-log coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Slope of `log(value / (ln n)^q)` against `log n`.
    pub exponent: f64,
    /// `q`: 3/4 for `d = 2`, `1/d` for `d >= 3`.
    pub log_correction_exponent: f64,
    /// Slope of `log(value / rate(n))` against `log n`, `rate` being the
    /// predicted rate; zero when the prediction is exact.
    pub residual_slope: f64,
    /// Slope of `log value` against `log n` with no correction.
    pub raw_exponent: f64,
    pub intercept: f64,
    pub medians: Vec<(usize, f64)>,
}

/// Predicted power of `n` (`1/2` for `d = 2`, `1/d` otherwise) and the
/// logarithmic correction exponent.
pub fn rate_exponents(d: usize) -> (f64, f64) {
    if d == 2 {
        (0.5, 0.75)
    } else {
        (1.0 / d as f64, 1.0 / d as f64)
    }
}

fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn fit_rate(medians: &[(usize, f64)], d: usize) -> Result<RateFit> {
    let pts: Vec<(usize, f64)> = medians.iter().copied().filter(|&(n, v)| n >= 2 && v > 0.0 && v.is_finite()).collect();
    if pts.len() < 3 {
        return Err(Error::TooFewPoints(pts.len()));
    }
    let (p, q) = rate_exponents(d);
    let xs: Vec<f64> = pts.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let raw: Vec<f64> = pts.iter().map(|&(_, v)| v.ln()).collect();
    let corrected: Vec<f64> = pts.iter().zip(&raw).map(|(&(n, _), y)| y - q * (n as f64).ln().ln()).collect();
    let (exponent, intercept) = ols(&xs, &corrected);
    let (raw_exponent, _) = ols(&xs, &raw);
    Ok(RateFit {
        exponent,
        log_correction_exponent: q,
        residual_slope: exponent + p,
        raw_exponent,
        intercept,
        medians: pts,
    })
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub n: usize,
    pub upper: f64,
    pub lower: f64,
    pub escalations: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub scheme: Scheme,
    pub dim: usize,
    pub trials: usize,
    pub medians: Vec<MedianRow>,
    pub upper_fit: Option<RateFit>,
    pub failures: usize,
    pub escalations: usize,
    /// Trials with `lower > upper`.
    pub sandwich_violations: usize,
    pub median_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<TrialRecord>,
    pub summary: ExperimentSummary,
}

/// Runs every `(n, trial)` pair in parallel; records come back ordered by
/// `(n, seed)`.
pub fn run_trials(rho: &Density, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = cfg
        .n_schedule
        .iter()
        .flat_map(|&n| (0..cfg.trials).map(move |t| (n, t)))
        .map(|(n, t)| (n, cfg.seed(t)))
        .collect();
    let mut records: Vec<TrialRecord> = jobs.par_iter().map(|&(n, seed)| run_trial(rho, n, seed, cfg)).collect();
    records.sort_by(|a, b| (a.n, a.seed).cmp(&(b.n, b.seed)));
    let summary = summarize(&records, cfg, rho.dim());
    Ok(ExperimentOutput { records, summary })
}

fn summarize(records: &[TrialRecord], cfg: &ExperimentConfig, d: usize) -> ExperimentSummary {
    let mut medians = Vec::new();
    for &n in &cfg.n_schedule {
        let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.n == n).collect();
        let ok: Vec<&&TrialRecord> = rows.iter().filter(|r| r.error.is_none()).collect();
        medians.push(MedianRow {
            n,
            upper: median(&mut ok.iter().map(|r| r.upper).collect::<Vec<_>>()),
            lower: median(&mut ok.iter().map(|r| r.lower).collect::<Vec<_>>()),
            escalations: ok.iter().filter(|r| r.escalated).count(),
            failures: rows.len() - ok.len(),
        });
    }
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    // A zero lower bound makes the ratio infinite rather than dropping the trial.
    let mut ratios: Vec<f64> =
        ok.iter().map(|r| if r.lower > 0.0 { r.upper / r.lower } else { f64::INFINITY }).collect();
    let upper_pts: Vec<(usize, f64)> = medians.iter().map(|m| (m.n, m.upper)).collect();
    ExperimentSummary {
        scheme: cfg.scheme.resolve(d),
        dim: d,
        trials: cfg.trials,
        upper_fit: fit_rate(&upper_pts, d).ok(),
        failures: records.len() - ok.len(),
        escalations: ok.iter().filter(|r| r.escalated).count(),
        sandwich_violations: ok.iter().filter(|r| r.lower > r.upper).count(),
        median_ratio: if ratios.is_empty() { f64::INFINITY } else { median(&mut ratios) },
        medians,
    }
}

/// Writes `trials.csv`, `medians.csv`, `summary.json` and `plot.gp` into
/// `dir`; returns the paths written.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let trials = dir.join("trials.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&trials)?);
    writeln!(w, "n,seed,upper,lower,escalated,wall_ms")?;
    for r in &out.records {
        writeln!(w, "{},{},{:?},{:?},{},{}", r.n, r.seed, r.upper, r.lower, r.escalated, r.wall_ms)?;
    }
    w.flush()?;
    let medians = dir.join("medians.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&medians)?);
    writeln!(w, "n,median_upper,median_lower,escalations,failures")?;
    for m in &out.summary.medians {
        writeln!(w, "{},{:?},{:?},{},{}", m.n, m.upper, m.lower, m.escalations, m.failures)?;
    }
    w.flush()?;
    let summary = dir.join("summary.json");
    fs::write(&summary, serde_json::to_string_pretty(&out.summary)?)?;
    let plot = dir.join("plot.gp");
    fs::write(&plot, plot_script(&out.summary))?;
    Ok(vec![trials, medians, summary, plot])
}

fn plot_script(s: &ExperimentSummary) -> String {
    let (p, q) = rate_exponents(s.dim);
    format!(
        "# gnuplot script; run from this directory with `gnuplot plot.gp`\n\
         set datafile separator ','\n\
         set logscale xy\n\
         set key top right\n\
         set xlabel 'n'\n\
         set ylabel 'distance'\n\
         set terminal pngcairo size 900,600\n\
         set output 'rates.png'\n\
         rate(n) = log(n)**{q} / n**{p}\n\
         c = real(system(\"awk -F, 'NR==2{{print $2}}' medians.csv\")) / rate(real(system(\"awk -F, 'NR==2{{print $1}}' medians.csv\")))\n\
         plot 'trials.csv' skip 1 using 1:3 with points pt 7 ps 0.4 title 'upper (trials)', \\\n\
         \x20    'medians.csv' skip 1 using 1:2 with linespoints lw 2 title 'median upper', \\\n\
         \x20    'medians.csv' skip 1 using 1:3 with linespoints lw 2 title 'median lower', \\\n\
         \x20    c * rate(x) with lines dt 2 title 'predicted rate'\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        parse_config(text, "test").unwrap()
    }

    const UNIFORM2: &str = r#"{"domain": [[[0,0],[1,1]]], "kind": "uniform", "lambda": 1}"#;

    #[test]
    fn exact_model_is_recovered() {
        let m: Vec<(usize, f64)> = (8..16).map(|e| 1usize << e).map(|n| (n, (n as f64).ln().powf(1.0 / 3.0) * (n as f64).powf(-1.0 / 3.0))).collect();
        let f = fit_rate(&m, 3).unwrap();
        assert!((f.exponent + 1.0 / 3.0).abs() < 1e-10);
        assert!(f.residual_slope.abs() < 1e-10);
    }

    #[test]
    fn pure_power_leaves_the_log_slope() {
        let ns: Vec<usize> = (8..17).map(|e| 1usize << e).collect();
        let m: Vec<(usize, f64)> = ns.iter().map(|&n| (n, (n as f64).powf(-0.5))).collect();
        let f = fit_rate(&m, 2).unwrap();
        let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = ns.iter().map(|&n| 0.75 * (n as f64).ln().ln()).collect();
        let (log_slope, _) = ols(&xs, &ys);
        assert!((f.residual_slope + log_slope).abs() < 1e-12);
        assert!((f.raw_exponent + 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_values_have_zero_exponent() {
        let m: Vec<(usize, f64)> = (4..10).map(|e| (1usize << e, 0.7)).collect();
        assert!(fit_rate(&m, 2).unwrap().raw_exponent.abs() < 1e-12);
        let m: Vec<(usize, f64)> = (4..10).map(|e| 1usize << e).map(|n| (n, 0.7 * (n as f64).ln().powf(0.75))).collect();
        assert!(fit_rate(&m, 2).unwrap().exponent.abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(fit_rate(&[(4, 1.0), (8, 0.5)], 2), Err(Error::TooFewPoints(2))));
    }

    #[test]
    fn config_validation_and_diagnostics() {
        let bad = format!(r#"{{"density": {UNIFORM2}, "scheme": "hall2d", "n_schedule": [8, 4], "trials": 1}}"#);
        assert!(matches!(parse_config(&bad, "x"), Err(Error::Config(_))));
        let zero = format!(r#"{{"density": {UNIFORM2}, "scheme": "hall2d", "n_schedule": [4], "trials": 0}}"#);
        assert!(parse_config(&zero, "x").is_err());
        let msg = parse_config("{\n  \"scheme\": \"hall2d\",\n  oops\n}", "cfg.json").unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn smoke_run_writes_files() {
        let c = cfg(&format!(r#"{{"density": {UNIFORM2}, "scheme": "auto", "n_schedule": [4], "trials": 1}}"#));
        let rho = c.load_density(Path::new(".")).unwrap();
        let out = run_trials(&rho, &c).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].error.is_none());
        assert!(out.records[0].upper >= out.records[0].lower);
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&out, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let csv = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), "n,seed,upper,lower,escalated,wall_ms");
    }

    #[test]
    fn untimed_runs_are_byte_identical() {
        let text = format!(
            r#"{{"density": {UNIFORM2}, "scheme": "hall2d", "n_schedule": [16, 64, 256], "trials": 4, "timing": false}}"#
        );
        let c = cfg(&text);
        let rho = c.load_density(Path::new(".")).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_outputs(&run_trials(&rho, &c).unwrap(), a.path()).unwrap();
        write_outputs(&run_trials(&rho, &c).unwrap(), b.path()).unwrap();
        for f in ["trials.csv", "medians.csv", "summary.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn auto_scheme_by_dimension() {
        assert_eq!(Scheme::Auto.resolve(2), Scheme::Hall2d);
        assert_eq!(Scheme::Auto.resolve(3), Scheme::Highd);
        assert_eq!(auto_cert_mesh(4096, 2), 7);
        assert_eq!(auto_cert_mesh(1 << 17, 3), 5);
    }
}
