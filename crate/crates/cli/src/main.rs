//! Command-line driver: sampling, transports, matchings, batch experiments
//! and rate fits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use winf::bounds::lower_bound_certificate;
use winf::density::Density;
use winf::error::{Error, Result};
use winf::experiment::{
    auto_cert_mesh, fit_rate, parse_config, run_trials, upper_bound, write_outputs, DensitySource, ExperimentConfig, Scheme,
};
use winf::matching::{bottleneck_match, hall_matching_2d, BipartiteInstance, HallSummary, Left};
use winf::partition::rectangle_partition_n;
use winf::sampling::sample;

#[derive(Parser)]
#[command(name = "winf", version, about = "Sup-transport distances between densities and their samples")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Highd,
    Hall2d,
    Auto,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Highd => Scheme::Highd,
            SchemeArg::Hall2d => Scheme::Hall2d,
            SchemeArg::Auto => Scheme::Auto,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a seeded sample from a density and write it as CSV.
    Sample {
        /// Density JSON file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Couple a density with a fresh sample and report the certified upper
    /// bound and the lower certificate as JSON.
    Transport {
        /// Density JSON file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SchemeArg::Auto)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 3.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        l_cfg: f64,
        /// Constant `c` of the cutoff depth `floor(log2(n / (c alpha ln n)))`.
        #[arg(long, default_value_t = 10.0)]
        kn_constant: f64,
        /// Mesh exponent of the lower-bound search; chosen from `n` when absent.
        #[arg(long)]
        cert_mesh: Option<u32>,
        /// Output JSON; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bottleneck matching of two CSV point sets, or rectangle-to-sample
    /// matching of a planar density. Writes `i,j,distance` rows and prints
    /// the summary JSON.
    Match {
        #[arg(long, requires = "right", conflicts_with = "config")]
        left: Option<PathBuf>,
        #[arg(long, requires = "left")]
        right: Option<PathBuf>,
        /// Density JSON file on a single planar box.
        #[arg(long, requires = "n")]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        l_cfg: f64,
        /// Output CSV of matched pairs; stdout when absent, in which case
        /// the summary goes to stderr.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a batch experiment described by a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed, overriding the config's seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        l_cfg: Option<f64>,
    },
    /// Fit a rate to a medians CSV.
    Fit {
        /// CSV with an `n` column.
        #[arg(long)]
        medians: PathBuf,
        #[arg(long)]
        dim: usize,
        /// Column holding the values to fit.
        #[arg(long, default_value = "median_upper")]
        column: String,
    },
}

/// Exit status for an error: 2 for bad input, 1 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::MeshCap(_)
        | Error::InvalidBox(_)
        | Error::InvalidDensity(_)
        | Error::DensityOutOfBounds { .. }
        | Error::NegativeDensity(_)
        | Error::Disconnected(_)
        | Error::DegenerateFacet(..)
        | Error::Dimension { .. } => 2,
        _ => 1,
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Writes `bytes` to `out`, or to stdout when absent.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes)?;
        }
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

/// Config for a single `(n, seed)` run on the density at `path`.
fn single_run(path: &Path, scheme: Scheme, n: usize, seed: u64, alpha: f64, l_cfg: f64) -> Result<(ExperimentConfig, Density)> {
    read_input(path)?;
    let cfg = ExperimentConfig {
        density: DensitySource::Path(path.to_string_lossy().into_owned()),
        scheme,
        n_schedule: vec![n],
        trials: 1,
        seeds: None,
        base_seed: seed,
        alpha,
        l_cfg,
        kn_constant: 10.0,
        cert_mesh: None,
        discretize: None,
        timing: false,
        output: String::new(),
    };
    cfg.validate()?;
    let rho = cfg.load_density(Path::new(""))?;
    Ok((cfg, rho))
}

/// Points from a CSV with a header row.
fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", path.display()));
    let text = read_input(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut pts = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        let p = rec.iter().map(|v| v.trim().parse::<f64>().map_err(|e| bad(&e))).collect::<Result<Vec<f64>>>()?;
        pts.push(p);
    }
    if pts.iter().any(|p| p.len() != pts[0].len()) {
        return Err(bad(&"rows of unequal length"));
    }
    Ok(pts)
}

fn json(v: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

#[derive(serde::Serialize)]
struct TransportReport {
    n: usize,
    seed: u64,
    scheme: Scheme,
    dim: usize,
    upper: f64,
    lower: f64,
    escalated: bool,
    certificate: winf::bounds::LowerBoundCertificate,
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Sample { config, n, seed, out } => {
            let (_, rho) = single_run(&config, Scheme::Auto, n, seed, 3.0, 1.0)?;
            let mut buf = Vec::new();
            sample(&rho, n, seed)?.write_csv(&mut buf)?;
            emit(out.as_deref(), &buf)?;
        }
        Cmd::Transport { config, n, seed, scheme, alpha, l_cfg, kn_constant, cert_mesh, out } => {
            let (mut cfg, rho) = single_run(&config, scheme.into(), n, seed, alpha, l_cfg)?;
            cfg.kn_constant = kn_constant;
            cfg.cert_mesh = cert_mesh;
            cfg.validate()?;
            let (upper, escalated, s) = upper_bound(&rho, n, seed, &cfg)?;
            let certificate = lower_bound_certificate(&rho, &s, cert_mesh.unwrap_or_else(|| auto_cert_mesh(n, rho.dim())))?;
            let report = TransportReport {
                n,
                seed,
                scheme: cfg.scheme.resolve(rho.dim()),
                dim: rho.dim(),
                upper,
                lower: certificate.r,
                escalated,
                certificate,
            };
            emit(out.as_deref(), &json(&report)?)?;
        }
        Cmd::Match { left, right, config, n, seed, l_cfg, out } => {
            let ((inst, m), summary) = match (left, right, config, n) {
                (Some(l), Some(r), _, _) => {
                    let inst = BipartiteInstance::points(read_points(&l)?, read_points(&r)?);
                    if inst.right.is_empty() || !matches!(&inst.left, Left::Points(p) if p[0].len() == inst.right[0].len()) {
                        return Err(Error::Config("point sets must be non-empty and of equal dimension".into()));
                    }
                    let m = bottleneck_match(&inst)?;
                    let summary = HallSummary { radius: m.bottleneck_radius, escalated: false, n: inst.n() };
                    ((inst, m), summary)
                }
                (_, _, Some(c), Some(n)) => {
                    let (_, rho) = single_run(&c, Scheme::Hall2d, n, seed, 3.0, l_cfg)?;
                    if rho.dim() != 2 || rho.domain().boxes().len() != 1 {
                        return Err(Error::Config("rectangle matching needs a density on a single planar box".into()));
                    }
                    let s = sample(&rho, n, seed)?;
                    let part = rectangle_partition_n(&rho, &rho.domain().bounding_box(), n, rho.lambda())?;
                    let h = hall_matching_2d(&s, &part, l_cfg)?;
                    let summary = h.summary();
                    let inst = BipartiteInstance { left: Left::BoxesFar(part.rects), right: s.points };
                    ((inst, h.matching), summary)
                }
                _ => return Err(Error::Config("give --left and --right, or --config and --n".into())),
            };
            let mut buf = Vec::new();
            m.write_csv(&inst, &mut buf)?;
            emit(out.as_deref(), &buf)?;
            let text = json(&summary)?;
            if out.is_some() {
                std::io::stdout().write_all(&text)?;
            } else {
                std::io::stderr().write_all(&text)?;
            }
        }
        Cmd::Experiment { config, out, seed, alpha, l_cfg } => {
            let mut cfg = parse_config(&read_input(&config)?, &config.display().to_string())?;
            if let Some(s) = seed {
                cfg.base_seed = s;
                cfg.seeds = None;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(l) = l_cfg {
                cfg.l_cfg = l;
            }
            cfg.validate()?;
            let base = config.parent().unwrap_or(Path::new(""));
            let rho = cfg.load_density(base)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output));
            let result = run_trials(&rho, &cfg)?;
            write_outputs(&result, &dir)?;
            std::io::stdout().write_all(&json(&result.summary)?)?;
            if result.summary.failures > 0 {
                for r in result.records.iter().filter(|r| r.error.is_some()) {
                    eprintln!("trial n={} seed={} failed: {}", r.n, r.seed, r.error.as_deref().unwrap_or(""));
                }
                return Ok(ExitCode::from(3));
            }
        }
        Cmd::Fit { medians, dim, column } => {
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", medians.display()));
            let text = read_input(&medians)?;
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let headers = r.headers().map_err(|e| bad(&e))?.clone();
            let col = |name: &str| headers.iter().position(|h| h.trim() == name).ok_or_else(|| bad(&format!("no column `{name}`")));
            let (cn, cv) = (col("n")?, col(&column)?);
            let mut pts = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(|e| bad(&e))?;
                let n = rec[cn].trim().parse::<usize>().map_err(|e| bad(&e))?;
                let v = rec[cv].trim().parse::<f64>().map_err(|e| bad(&e))?;
                pts.push((n, v));
            }
            if dim == 0 {
                return Err(Error::Config("dimension must be positive".into()));
            }
            std::io::stdout().write_all(&json(&fit_rate(&pts, dim)?)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
