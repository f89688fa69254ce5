//! Acceptance suite. Criteria run one after another so that their wall-clock
//! budgets are measured without interference; each prints one PASS/FAIL line
//! and the process fails if any criterion does.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use winf::bounds::{bernstein, chernoff};
use winf::density::{l_shape, ring, Density, DensityConfig};
use winf::experiment::{run_trials, DensitySource, ExperimentConfig, ExperimentOutput, Scheme};
use winf::geometry::{Aabb, BoxUnionDomain};
use winf::matching::{bottleneck_match, BipartiteInstance};
use winf::multiscale::{box_field, cutoff_depth, density_to_density, empirical_coupling_highd, HighdOptions};
use winf::partition::dyadic_nu;
use winf::pushforward::{probe_grid, pushforward_check, Target};
use winf::sampling::sample;
use winf::wp::build_wp;

// Pinned tolerances and budgets.
const C1_INSTANCES: usize = 1000;
const C1_BUDGET: Duration = Duration::from_secs(60);
const C2_DENSITIES: usize = 50;
const C2_DEPTH: u32 = 16;
const C2_BUDGET: Duration = Duration::from_secs(120);
const C3_PAIRS: usize = 30;
const C3_MAX_SPREAD: f64 = 5.0;
const C3_BALANCE_TOL: f64 = 1e-9;
const C3_BUDGET: Duration = Duration::from_secs(300);
const C4_EXPONENT: (f64, f64) = (-0.43, -0.23);
const C4_BUDGET: Duration = Duration::from_secs(15 * 60);
const C5_SLOPE_TOL: f64 = 0.1;
const C5_MAX_ESCALATION: f64 = 0.05;
const C5_BUDGET: Duration = Duration::from_secs(20 * 60);
const C6_MAX_RATIO: f64 = 30.0;
const C7_PAIRS: usize = 20;
const C7_REL_TOL: f64 = 1e-9;
const C8_SLOPE_TOL: f64 = 0.15;
const C9_ALPHA: f64 = 3.0;
const C9_DRAWS: usize = 10_000;

struct Line {
    criterion: u32,
    pass: bool,
}

fn report(criterion: u32, pass: bool, detail: String) -> Line {
    println!("{} criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    Line { criterion, pass }
}

fn unit_square() -> BoxUnionDomain {
    BoxUnionDomain::unit(2)
}

/// Smallest over all `n!` bijections of the largest matched cost.
fn brute_force(inst: &BipartiteInstance) -> f64 {
    fn rec(inst: &BipartiteInstance, i: usize, used: &mut [bool], cur: f64, best: &mut f64) {
        if cur >= *best {
            return;
        }
        if i == inst.n() {
            *best = cur;
            return;
        }
        for j in 0..inst.n() {
            if !used[j] {
                used[j] = true;
                rec(inst, i + 1, used, cur.max(inst.cost(i, j)), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(inst, 0, &mut vec![false; inst.n()], 0.0, &mut best);
    best
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for k in 0..C1_INSTANCES {
        let d = 2 + k % 2;
        let n = rng.gen_range(1..=8);
        let mut pts = || -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect() };
        let inst = BipartiteInstance::points(pts(), pts());
        let got = bottleneck_match(&inst).unwrap().bottleneck_radius;
        if got.to_bits() != brute_force(&inst).to_bits() {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    report(
        1,
        mismatches == 0 && t < C1_BUDGET,
        format!("{mismatches} of {C1_INSTANCES} radii differ from brute force; {:.1}s (budget {}s)", t.as_secs_f64(), C1_BUDGET.as_secs()),
    )
}

/// Grid density with values drawn in `[1/lambda, lambda]`, redrawn until the
/// normalized values respect the bound.
fn random_grid_density(rng: &mut ChaCha20Rng, d: usize, lambda: f64) -> Density {
    loop {
        let cells: Vec<usize> = (0..d).map(|_| rng.gen_range(1..=6)).collect();
        let values = (0..cells.iter().product()).map(|_| rng.gen_range(1.0 / lambda..=lambda)).collect();
        if let Ok(rho) = Density::grid(BoxUnionDomain::unit(d), cells, values, lambda) {
            return rho;
        }
    }
}

fn criterion_2() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (mut violations, mut worst) = (0usize, 0.0f64);
    for lambda in [1.0, 2.0, 4.0] {
        for _ in 0..C2_DENSITIES {
            let rho = random_grid_density(&mut rng, 2, lambda);
            match dyadic_nu(&rho, &Aabb::unit(2), C2_DEPTH, lambda) {
                Ok(root) => {
                    let r = root.max_aspect_ratio();
                    worst = worst.max(r / (2.0 * lambda * lambda));
                    if r > 2.0 * lambda * lambda {
                        violations += 1;
                    }
                }
                Err(_) => violations += 1,
            }
        }
    }
    let t = start.elapsed();
    report(
        2,
        violations == 0 && t < C2_BUDGET,
        format!(
            "{violations} aspect-ratio violations over {} densities at depth {C2_DEPTH}; worst ratio / 2 lambda^2 = {worst:.3}; {:.1}s (budget {}s)",
            3 * C2_DENSITIES,
            t.as_secs_f64(),
            C2_BUDGET.as_secs()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    winf::experiment::median(&mut v)
}

fn criterion_3() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let lambda = 2.0;
    let probes = probe_grid(&Aabb::unit(2), 4);
    let (mut medians, mut worst_balance, mut flagged) = (Vec::new(), 0.0f64, 0usize);
    for delta in [1e-1, 1e-2, 1e-3] {
        let mut ratios = Vec::new();
        for _ in 0..C3_PAIRS {
            let raw: Vec<f64> = (0..64).map(|_| rng.gen_range(0.7..1.4)).collect();
            let mean = raw.iter().sum::<f64>() / 64.0;
            let base: Vec<f64> = raw.iter().map(|v| v / mean).collect();
            // Half the cells go up by delta and half down, so masses agree.
            let mut signs: Vec<f64> = (0..64).map(|i| if i < 32 { 1.0 } else { -1.0 }).collect();
            for i in (1..64).rev() {
                signs.swap(i, rng.gen_range(0..=i));
            }
            let pert: Vec<f64> = base.iter().zip(&signs).map(|(v, s)| v + delta * s).collect();
            let r1 = Density::grid(unit_square(), vec![8, 8], pert, lambda).unwrap();
            let r2 = Density::grid(unit_square(), vec![8, 8], base, lambda).unwrap();
            let (f1, f2) = (box_field(&r1).unwrap(), box_field(&r2).unwrap());
            let sup = f1.values().iter().zip(f2.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let t = density_to_density(f1, f2, lambda).unwrap();
            ratios.push(t.certified_bound() / sup);
            let ledger = pushforward_check(&t, &r1, Target::Density(&r2), &probes).unwrap();
            worst_balance = worst_balance.max(ledger.max_abs_error());
            flagged += ledger.flagged() as usize;
        }
        medians.push(median(ratios));
    }
    let spread = medians.iter().cloned().fold(0.0, f64::max) / medians.iter().cloned().fold(f64::INFINITY, f64::min);
    let t = start.elapsed();
    report(
        3,
        spread < C3_MAX_SPREAD && worst_balance <= C3_BALANCE_TOL && flagged == 0 && t < C3_BUDGET,
        format!(
            "median bound/|drho| per magnitude {medians:.3?}, spread {spread:.2} (limit {C3_MAX_SPREAD}); worst probe imbalance {worst_balance:.1e} (limit {C3_BALANCE_TOL:.0e}), {flagged} off-domain; {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn experiment(density: DensityConfig, scheme: Scheme, exps: std::ops::RangeInclusive<u32>, trials: usize) -> (ExperimentOutput, Duration) {
    let cfg = ExperimentConfig {
        density: DensitySource::Inline(density),
        scheme,
        n_schedule: exps.map(|e| 1usize << e).collect(),
        trials,
        seeds: None,
        base_seed: 0,
        alpha: 3.0,
        l_cfg: 1.0,
        kn_constant: 10.0,
        cert_mesh: None,
        discretize: None,
        timing: true,
        output: String::new(),
    };
    let rho = cfg.load_density(std::path::Path::new("")).unwrap();
    let start = Instant::now();
    let out = run_trials(&rho, &cfg).unwrap();
    (out, start.elapsed())
}

fn uniform_config(domain: &BoxUnionDomain, lambda: f64) -> DensityConfig {
    DensityConfig {
        domain: domain.boxes().iter().map(|b| [b.lo.clone(), b.hi.clone()]).collect(),
        kind: "uniform".into(),
        lambda,
        grid: None,
        values: None,
        amplitude: None,
        frequency: None,
    }
}

/// Fixed `lambda = 2` density on the unit square.
fn nonuniform_config() -> DensityConfig {
    DensityConfig {
        grid: Some(vec![4, 4]),
        values: Some(vec![
            0.6, 1.4, 0.8, 1.2, 1.5, 0.55, 1.1, 0.9, 0.7, 1.3, 1.6, 0.6, 1.2, 0.8, 0.65, 1.45,
        ]),
        kind: "grid".into(),
        ..uniform_config(&unit_square(), 2.0)
    }
}

fn criterion_4() -> (Line, ExperimentOutput) {
    let (out, t) = experiment(uniform_config(&BoxUnionDomain::unit(3), 1.0), Scheme::Highd, 9..=17, 10);
    let exponent = out.summary.upper_fit.as_ref().map_or(f64::NAN, |f| f.exponent);
    let (lo, hi) = C4_EXPONENT;
    let pass = (lo..=hi).contains(&exponent) && out.summary.failures == 0 && t < C4_BUDGET;
    let line = report(
        4,
        pass,
        format!(
            "fitted exponent {exponent:.4} in [{lo}, {hi}]; {} failed trials; {:.1}s (budget {}s)",
            out.summary.failures,
            t.as_secs_f64(),
            C4_BUDGET.as_secs()
        ),
    );
    (line, out)
}

fn criterion_5() -> (Line, Vec<ExperimentOutput>) {
    let mut outs = Vec::new();
    let mut total = Duration::ZERO;
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, cfg) in [("uniform", uniform_config(&unit_square(), 1.0)), ("lambda=2", nonuniform_config())] {
        let (out, t) = experiment(cfg, Scheme::Hall2d, 8..=16, 20);
        total += t;
        let slope = out.summary.upper_fit.as_ref().map_or(f64::NAN, |f| f.residual_slope);
        let rate = out.summary.escalations as f64 / out.records.len() as f64;
        pass &= slope.abs() <= C5_SLOPE_TOL && rate <= C5_MAX_ESCALATION && out.summary.failures == 0;
        parts.push(format!("{name}: residual slope {slope:+.4}, escalation rate {rate:.3}, {} failed", out.summary.failures));
        outs.push(out);
    }
    pass &= total < C5_BUDGET;
    let line = report(
        5,
        pass,
        format!(
            "{} (limits +-{C5_SLOPE_TOL}, {C5_MAX_ESCALATION}); {:.1}s (budget {}s)",
            parts.join("; "),
            total.as_secs_f64(),
            C5_BUDGET.as_secs()
        ),
    );
    (line, outs)
}

fn criterion_6(outs: &[&ExperimentOutput]) -> Line {
    let mut violations = 0;
    let mut ratios = Vec::new();
    for out in outs {
        let records: Vec<_> = out.records.iter().collect();
        violations += records.iter().filter(|r| r.error.is_some() || r.lower > r.upper).count();
        let rs: Vec<f64> = records.iter().map(|r| if r.lower > 0.0 { r.upper / r.lower } else { f64::INFINITY }).collect();
        ratios.push(median(rs));
    }
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    report(
        6,
        violations == 0 && worst <= C6_MAX_RATIO,
        format!(
            "{violations} trials with lower > upper or no bound; median upper/lower per experiment {ratios:.2?} (limit {C6_MAX_RATIO})"
        ),
    )
}

fn criterion_7() -> Line {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let (mut worst, mut boxes) = (0.0f64, 0usize);
    for k in 0..C7_PAIRS {
        let d = 2 + k % 2;
        let rho = random_grid_density(&mut rng, d, 2.0);
        let n = rng.gen_range(256..=4096);
        let s = sample(&rho, n, rng.gen()).unwrap();
        let c = empirical_coupling_highd(box_field(&rho).unwrap(), &s, HighdOptions::default()).unwrap();
        let ledger = pushforward_check(&c.transport, &rho, Target::Empirical(&s), &c.leaves).unwrap();
        // Empty boxes are measured against one atom's mass.
        worst = worst.max(ledger.max_rel_error(s.weight()));
        boxes += c.leaves.len();
    }
    report(
        7,
        worst <= C7_REL_TOL,
        format!("worst relative mass error {worst:.1e} over {boxes} level-k_n boxes of {C7_PAIRS} pairs (limit {C7_REL_TOL:.0e})"),
    )
}

fn criterion_8() -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, domain) in [("L-shape", l_shape()), ("ring", ring())] {
        let flood = build_wp(&domain).map_or(false, |dec| dec.connectivity_preserved());
        let (out, t) = experiment(uniform_config(&domain, 2.0), Scheme::Hall2d, 8..=16, 20);
        let slope = out.summary.upper_fit.as_ref().map_or(f64::NAN, |f| f.residual_slope);
        pass &= flood && slope.abs() <= C8_SLOPE_TOL && out.summary.failures == 0;
        parts.push(format!(
            "{name}: flood fill {}, residual slope {slope:+.4}, {} failed, {:.1}s",
            if flood { "ok" } else { "broken" },
            out.summary.failures,
            t.as_secs_f64()
        ));
    }
    report(8, pass, format!("{} (limit +-{C8_SLOPE_TOL})", parts.join("; ")))
}

fn criterion_9() -> Line {
    let mut replay_fail = Vec::new();
    for e in 10..=20 {
        let n = 1u64 << e;
        let k = cutoff_depth(n as usize, C9_ALPHA, 10.0);
        let p = (-(k as f64)).exp2();
        let b = bernstein(n, p, 0.5 * p).unwrap();
        if !(b.bound <= 2.0 * (n as f64).powf(-C9_ALPHA)) {
            replay_fail.push(e);
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut mc_fail = 0;
    let cases = [(20u64, 0.5, 0.2), (50, 0.3, 0.1), (100, 0.1, 0.05), (200, 0.7, 0.08), (500, 0.05, 0.02)];
    for &(m, p, t) in &cases {
        let bad = (0..C9_DRAWS)
            .filter(|_| {
                let s = (0..m).filter(|_| rng.gen::<f64>() < p).count() as f64;
                (s / m as f64 - p).abs() >= t
            })
            .count();
        if bad as f64 / C9_DRAWS as f64 > chernoff(m, p, t).unwrap().bound {
            mc_fail += 1;
        }
    }
    report(
        9,
        replay_fail.is_empty() && mc_fail == 0,
        format!(
            "bernstein replay fails at n = 2^{replay_fail:?} of 2^10..2^20; Monte Carlo exceeds chernoff in {mc_fail} of {} cases over {C9_DRAWS} draws",
            cases.len()
        ),
    )
}

fn main() {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3()];
    let (l4, out4) = criterion_4();
    let (l5, outs5) = criterion_5();
    lines.push(l4);
    lines.push(l5);
    let all: Vec<&ExperimentOutput> = std::iter::once(&out4).chain(&outs5).collect();
    lines.push(criterion_6(&all));
    lines.push(criterion_7());
    lines.push(criterion_8());
    lines.push(criterion_9());
    let failed: Vec<u32> = lines.iter().filter(|l| !l.pass).map(|l| l.criterion).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", lines.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
