//! The pipelines behind the command line. Each one takes a parsed config,
//! runs a measurement or a verification, writes plot-ready CSV tables into
//! the output directory, and returns a manifest holding the headline
//! estimates and — for verification runs — the pass/fail verdict. Nothing
//! here decides exit codes or prints; that is the binary's job.
//!
//! Work is scheduled per environment (or per instance) with seeds derived
//! from the master seed and the item index, so every table is bit-exact
//! across thread counts and re-runs.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::dynamic::{
    annealed_gradient_curve, annealed_potential, log_log_slope, required_half_width,
    variance_scaling, DynamicError, VarianceScaling,
};
use crate::environment::{
    ConductanceField, ConductanceLaw, EnvironmentError, SpeedMeasure, StaticEnvironment,
};
use crate::harness::config::{ConfigError, ExperimentConfig, LawKindSpec};
use crate::harness::io::{self, read_snapshot, write_snapshot, RunManifest, SnapshotError};
use crate::harness::oracle::classical_potential;
use crate::heatkernel::{llt_curve, HeatKernelError, HeatKernelOptions};
use crate::lattice::{annulus_targets, neighbors, site, Edge, LatticeError, Site, Window};
use crate::montecarlo::{estimate_sigma, gbar_from, MonteCarloError};
use crate::operator::{killed_green, OperatorError};
use crate::percolation::{component_in_ball, estimate_theta, ClusterGeometry, PercolationError};
use crate::potential::{
    based_extrapolate, check_corollary23, check_lemma22_identity, potential_profile,
    PotentialError, GBAR_UNIT,
};
use crate::rng::Stream;

/// Everything a pipeline needs besides its own arguments: the validated
/// config plus the provenance that goes into every manifest.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub config_path: String,
    pub config_hash: String,
    pub threads: usize,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, config_path: String, config_hash: String) -> RunContext {
        let threads = cfg.resolve_threads();
        RunContext { cfg, config_path, config_hash, threads }
    }

    fn manifest(&self, pipeline: &str) -> RunManifest {
        let mut m = RunManifest::new(pipeline, &self.cfg.experiment);
        m.config_path = self.config_path.clone();
        m.config_hash = self.config_hash.clone();
        m.seed = self.cfg.seed;
        m.threads = self.threads;
        m
    }
}

#[derive(thiserror::Error, Debug)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    HeatKernel(#[from] HeatKernelError),
    #[error(transparent)]
    MonteCarlo(#[from] MonteCarloError),
    #[error(transparent)]
    Percolation(#[from] PercolationError),
    #[error(transparent)]
    Dynamic(#[from] DynamicError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("cannot write results: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{0}")]
    Data(String),
}

impl HarnessError {
    /// Exit code when a run errors out: problems the user fixes by editing
    /// the config (including every window-too-small complaint, wherever it
    /// was detected) exit 3; genuine runtime failures exit 1. A run that
    /// finished but missed its thresholds is not an error — the binary
    /// turns `pass == Some(false)` into exit 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 3,
            HarnessError::Potential(PotentialError::WindowTooSmall { .. }) => 3,
            HarnessError::HeatKernel(HeatKernelError::WindowTooSmall { .. }) => 3,
            HarnessError::Dynamic(DynamicError::WindowTooSmall { .. }) => 3,
            HarnessError::Operator(OperatorError::NotInterior { .. }) => 3,
            HarnessError::MonteCarlo(MonteCarloError::StartOnFrame(_)) => 3,
            HarnessError::Percolation(PercolationError::TooFewEnvironments(_)) => 3,
            _ => 1,
        }
    }
}

// Seed-derivation tags: one namespace per purpose so no pipeline can reuse
// another's randomness by accident.
const SEED_DOMAIN: u64 = 0x11A8;
const PURPOSE_ENV: u64 = 1;
const PURPOSE_THETA: u64 = 2;
const PURPOSE_SIGMA: u64 = 3;
const PURPOSE_DYNAMIC: u64 = 5;
const PURPOSE_INTERFACE: u64 = 6;
const PURPOSE_INSTANCE: u64 = 7;

fn derived_seed(master: u64, purpose: u64, index: u64) -> u64 {
    Stream::keyed(master, &[SEED_DOMAIN, purpose, index]).next_u64()
}

/// Runs `f` on a dedicated pool of `threads` workers. Results stay
/// deterministic at any pool size because all parallel maps are indexed
/// and collected in order.
fn install<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn write_table(
    manifest: &mut RunManifest,
    out_dir: &Path,
    name: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), HarnessError> {
    io::write_csv(
        &out_dir.join(name),
        Some((&manifest.config_hash, manifest.seed)),
        header,
        rows,
    )?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn ff(v: f64) -> String {
    io::fmt_float(v)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// The entries a trend check looks at: the second half of the grid
/// (asymptotic statements are judged where the grid is largest).
fn top_half(v: &[f64]) -> &[f64] {
    &v[v.len() / 2..]
}

struct LineFit {
    slope: f64,
    intercept: f64,
    slope_se: f64,
}

/// Least-squares line through `(x, y)`. With per-point standard errors the
/// fit is inverse-variance weighted and the slope error comes from the
/// weights; otherwise it is the residual-based textbook estimate.
fn line_fit(xs: &[f64], ys: &[f64], ses: Option<&[f64]>) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "a line needs two points");
    let weighted = matches!(ses, Some(s) if s.iter().all(|&v| v > 0.0 && v.is_finite()));
    let w: Vec<f64> = if weighted {
        ses.unwrap().iter().map(|s| 1.0 / (s * s)).collect()
    } else {
        vec![1.0; xs.len()]
    };
    let sw: f64 = w.iter().sum();
    let xb = xs.iter().zip(&w).map(|(x, w)| w * x).sum::<f64>() / sw;
    let yb = ys.iter().zip(&w).map(|(y, w)| w * y).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(&w).map(|(x, w)| w * (x - xb) * (x - xb)).sum();
    let sxy: f64 =
        xs.iter().zip(ys).zip(&w).map(|((x, y), w)| w * (x - xb) * (y - yb)).sum();
    let slope = sxy / sxx;
    let intercept = yb - slope * xb;
    let slope_se = if weighted {
        (1.0 / sxx).sqrt()
    } else if xs.len() > 2 {
        let ss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let r = y - (intercept + slope * x);
                r * r
            })
            .sum();
        (ss / (xs.len() as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LineFit { slope, intercept, slope_se }
}

/// Reference value of `gbar` for threshold checks: exact for constant
/// conductances on the full lattice, otherwise estimated from the walk
/// covariance and the cluster density.
#[derive(Clone, Copy, Debug)]
pub struct GbarReference {
    pub gbar: f64,
    pub std_error: f64,
    pub method: &'static str,
}

pub fn gbar_reference(ctx: &RunContext) -> Result<GbarReference, HarnessError> {
    let cfg = &ctx.cfg;
    if cfg.law.p_open == 1.0 && cfg.law.kind == LawKindSpec::Constant {
        // g = 1 / (pi sqrt(det Sigma^2) theta): constant c scales the
        // covariance by c under the variable-speed clock and the speed
        // measure by c under the constant-speed clock, so both give
        // exactly gbar = 1 / (2 pi c).
        let c = cfg.law.value.unwrap_or(1.0);
        return Ok(GbarReference {
            gbar: GBAR_UNIT / c,
            std_error: 0.0,
            method: "exact-constant",
        });
    }
    let law = cfg.law.build()?;
    let window = Window::new(cfg.half_width.min(160));
    let theta = estimate_theta(
        law,
        window,
        derived_seed(cfg.seed, PURPOSE_THETA, 0),
        cfg.num_envs.max(8),
    )?;
    let sigma = estimate_sigma(
        law,
        cfg.speed_measure(),
        cfg.horizon,
        cfg.num_envs.max(4),
        cfg.num_walks.max(100),
        window,
        derived_seed(cfg.seed, PURPOSE_SIGMA, 0),
    )?;
    let g = gbar_from(&sigma, &theta)?;
    Ok(GbarReference { gbar: g.gbar, std_error: g.std_error, method: "monte-carlo" })
}

/// Connected component of `center` through open edges inside the l-inf box
/// of half-width `m`. Potential scans use a box rather than a diamond so
/// that targets in every direction keep the same margin to the ambient
/// boundary.
fn box_component<C: ConductanceField>(
    env: &C,
    center: Site,
    m: i32,
) -> Result<Vec<Site>, EnvironmentError> {
    let inside =
        |s: Site| (s.x - center.x).abs() <= m && (s.y - center.y).abs() <= m;
    let mut seen: HashSet<Site> = HashSet::new();
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    seen.insert(center);
    queue.push_back(center);
    while let Some(s) = queue.pop_front() {
        out.push(s);
        for nb in neighbors(s) {
            if inside(nb) && !seen.contains(&nb) && env.conductance(Edge::between(s, nb))? > 0.0
            {
                seen.insert(nb);
                queue.push_back(nb);
            }
        }
    }
    Ok(out)
}

/// Solver-side exit statistics from one killed-Green solve: the expected
/// exit time `E[tau] = sum_y g(x0,y) theta(y)` and the exit distribution
/// over the outer boundary, `P(exit at b) = sum_{y ~ b} g(x0,y) w(y,b)` —
/// the walk's expected number of jumps onto the absorbing site, which it
/// visits at most once. Both formulas are what Monte Carlo runs are
/// checked against.
pub fn exit_prediction<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    x0: Site,
    a_set: &[Site],
) -> Result<(f64, Vec<(Site, f64)>), HarnessError> {
    let kg = killed_green(env, speed, a_set, x0)?;
    let inside: HashSet<Site> = a_set.iter().copied().collect();
    let mut mean_time = 0.0;
    let mut exits: BTreeMap<Site, f64> = BTreeMap::new();
    for &y in kg.sites() {
        let g = kg.value(y);
        mean_time += g * env.theta(y, speed)?;
        for nb in neighbors(y) {
            if !inside.contains(&nb) {
                let w = env.conductance(Edge::between(y, nb))?;
                if w > 0.0 {
                    *exits.entry(nb).or_insert(0.0) += g * w;
                }
            }
        }
    }
    Ok((mean_time, exits.into_iter().collect()))
}

// ---------------------------------------------------------------------------
// measurement pipelines
// ---------------------------------------------------------------------------

/// Samples one environment, writes it as a snapshot, and summarizes its
/// percolation geometry.
pub fn env_sample(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("env-sample");
    let law = cfg.law.build()?;
    let t0 = Instant::now();
    let env = StaticEnvironment::sample(law, cfg.window(), cfg.seed);
    let geo = ClusterGeometry::analyze(&env);
    write_snapshot(&out_dir.join("environment.rcm2"), &env)?;
    manifest.outputs.push("environment.rcm2".into());
    manifest.record("half_width", cfg.half_width as f64, 0.0);
    manifest.record("open_fraction", env.open_fraction(), 0.0);
    manifest.record("giant_density", geo.giant_density(), 0.0);
    manifest.record("giant_spans", if geo.giant_spans() { 1.0 } else { 0.0 }, 0.0);
    manifest.wall_seconds.insert("sample".into(), t0.elapsed().as_secs_f64());
    Ok(manifest)
}

/// Reads a snapshot back and reports the same summary as `env_sample`,
/// plus the range of open conductances. Needs no config.
pub fn env_inspect(snapshot: &Path) -> Result<RunManifest, HarnessError> {
    let env = read_snapshot(snapshot)?;
    let geo = ClusterGeometry::analyze(&env);
    let mut manifest = RunManifest::new("env-inspect", &snapshot.display().to_string());
    let open: Vec<f64> = env.raw().iter().copied().filter(|&v| v > 0.0).collect();
    manifest.record("half_width", env.window().half_width() as f64, 0.0);
    manifest.record("open_fraction", env.open_fraction(), 0.0);
    manifest.record("giant_density", geo.giant_density(), 0.0);
    manifest.record("giant_spans", if geo.giant_spans() { 1.0 } else { 0.0 }, 0.0);
    if !open.is_empty() {
        let lo = open.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = open.iter().copied().fold(0.0f64, f64::max);
        manifest.record("min_open_conductance", lo, 0.0);
        manifest.record("max_open_conductance", hi, 0.0);
    }
    Ok(manifest)
}

/// Cluster-density estimate over fresh environments.
pub fn run_theta(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("theta");
    let law = cfg.law.build()?;
    let t0 = Instant::now();
    let theta = install(ctx.threads, || {
        estimate_theta(
            law,
            cfg.window(),
            derived_seed(cfg.seed, PURPOSE_THETA, 0),
            cfg.num_envs.max(2),
        )
    })??;
    manifest.wall_seconds.insert("theta".into(), t0.elapsed().as_secs_f64());
    write_table(
        &mut manifest,
        out_dir,
        "theta.csv",
        &["theta_hat", "std_error", "num_envs", "spanning_fraction"],
        &[vec![
            ff(theta.theta_hat),
            ff(theta.std_error),
            theta.num_envs.to_string(),
            ff(theta.spanning_fraction),
        ]],
    )?;
    manifest.record("theta_hat", theta.theta_hat, theta.std_error);
    manifest.record("spanning_fraction", theta.spanning_fraction, 0.0);
    Ok(manifest)
}

/// Walk-covariance estimate, with the derived `gbar` when the cluster
/// density can be estimated too.
pub fn run_sigma(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("sigma");
    let law = cfg.law.build()?;
    let t0 = Instant::now();
    let (sigma, theta) = install(ctx.threads, || -> Result<_, HarnessError> {
        let sigma = estimate_sigma(
            law,
            cfg.speed_measure(),
            cfg.horizon,
            cfg.num_envs.max(2),
            cfg.num_walks,
            cfg.window(),
            derived_seed(cfg.seed, PURPOSE_SIGMA, 0),
        )?;
        let theta = estimate_theta(
            law,
            cfg.window(),
            derived_seed(cfg.seed, PURPOSE_THETA, 0),
            cfg.num_envs.max(2),
        )?;
        Ok((sigma, theta))
    })??;
    manifest.wall_seconds.insert("sigma".into(), t0.elapsed().as_secs_f64());
    let g = gbar_from(&sigma, &theta)?;
    write_table(
        &mut manifest,
        out_dir,
        "sigma.csv",
        &[
            "sigma_xx",
            "sigma_xy",
            "sigma_yy",
            "err_xx",
            "err_xy",
            "err_yy",
            "horizon",
            "aborted_fraction",
            "gbar_hat",
            "gbar_err",
        ],
        &[vec![
            ff(sigma.matrix[0][0]),
            ff(sigma.matrix[0][1]),
            ff(sigma.matrix[1][1]),
            ff(sigma.std_error[0][0]),
            ff(sigma.std_error[0][1]),
            ff(sigma.std_error[1][1]),
            ff(sigma.horizon),
            ff(sigma.aborted_fraction),
            ff(g.gbar),
            ff(g.std_error),
        ]],
    )?;
    manifest.record("sigma_xx", sigma.matrix[0][0], sigma.std_error[0][0]);
    manifest.record("sigma_xy", sigma.matrix[0][1], sigma.std_error[0][1]);
    manifest.record("sigma_yy", sigma.matrix[1][1], sigma.std_error[1][1]);
    manifest.record("gbar_hat", g.gbar, g.std_error);
    Ok(manifest)
}

/// Killed Green function on growing balls around a cluster point near the
/// origin: one solve per radius, reporting `g(x,x)` and `g(x,x)/ln n`.
pub fn run_green(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("green");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let t0 = Instant::now();
    let env = StaticEnvironment::sample(law, cfg.window(), derived_seed(cfg.seed, PURPOSE_ENV, 0));
    let geo = ClusterGeometry::analyze(&env);
    let base = geo.nearest_cluster_point([0.0, 0.0], 1.0)?;
    let rows = install(ctx.threads, || -> Result<Vec<Vec<String>>, HarnessError> {
        cfg.n_grid
            .par_iter()
            .map(|&n| {
                let domain = component_in_ball(&env, base, n)?;
                let kg = killed_green(&env, speed, &domain, base)?;
                let g = kg.value(base);
                let rep = kg.report();
                Ok(vec![
                    n.to_string(),
                    ff(g),
                    ff(g / (n as f64).ln()),
                    rep.unknowns.to_string(),
                    rep.iterations.to_string(),
                    ff(rep.relative_residual),
                ])
            })
            .collect()
    })??;
    manifest.wall_seconds.insert("solves".into(), t0.elapsed().as_secs_f64());
    let final_ratio: f64 = rows.last().map(|r| r[2].parse().unwrap()).unwrap_or(f64::NAN);
    write_table(
        &mut manifest,
        out_dir,
        "green.csv",
        &["n", "green", "ratio", "unknowns", "iterations", "residual"],
        &rows,
    )?;
    manifest.record("final_ratio", final_ratio, 0.0);
    Ok(manifest)
}

/// Potential-kernel values at short separations by Richardson-extrapolated
/// profile pairs. For the constant everywhere-open law the nearest value
/// has the closed form 1/(4c), which gates the verdict.
pub fn run_potential(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("potential");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let n_max = *cfg.n_grid.last().unwrap();
    let t0 = Instant::now();
    let env = StaticEnvironment::sample(law, cfg.window(), derived_seed(cfg.seed, PURPOSE_ENV, 0));
    let geo = ClusterGeometry::analyze(&env);
    let base = geo.nearest_cluster_point([0.0, 0.0], 1.0)?;
    let (full, half) = install(ctx.threads, || -> Result<_, HarnessError> {
        let full = potential_profile(&env, speed, base, n_max)?;
        let half = potential_profile(&env, speed, base, (n_max / 2).max(2))?;
        Ok((full, half))
    })??;
    manifest.wall_seconds.insert("profiles".into(), t0.elapsed().as_secs_f64());

    let mut seps: Vec<i32> = vec![1, 2];
    for &n in &cfg.n_grid {
        if n <= n_max / 2 && !seps.contains(&n) {
            seps.push(n);
        }
    }
    let mut rows = Vec::new();
    let mut seen: HashSet<Site> = HashSet::new();
    let mut skipped = 0usize;
    let mut a_axis_1 = f64::NAN;
    for &k in &seps {
        let mut wanted = vec![(k, site(base.x + k, base.y))];
        let d = ((k as f64) / std::f64::consts::SQRT_2).round() as i32;
        if d >= 1 {
            wanted.push((k, site(base.x + d, base.y + d)));
        }
        for (sep, cand) in wanted {
            let target =
                geo.nearest_cluster_point([cand.x as f64, cand.y as f64], 1.0)?;
            if target == base || !seen.insert(target) {
                continue;
            }
            match based_extrapolate(&full, &half, target) {
                Some((value, delta)) => {
                    if sep == 1 && a_axis_1.is_nan() {
                        a_axis_1 = value;
                    }
                    rows.push(vec![
                        sep.to_string(),
                        (target.x - base.x).to_string(),
                        (target.y - base.y).to_string(),
                        ff(value),
                        ff(delta),
                    ]);
                }
                None => skipped += 1,
            }
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::Data("no potential targets were connected".into()));
    }
    write_table(
        &mut manifest,
        out_dir,
        "potential.csv",
        &["sep", "dx", "dy", "value", "richardson_delta"],
        &rows,
    )?;
    manifest.record("a_axis_1", a_axis_1, 0.0);
    manifest.record("center_green", full.center_green, 0.0);
    manifest.record("targets_skipped", skipped as f64, 0.0);
    if cfg.law.p_open == 1.0 && cfg.law.kind == LawKindSpec::Constant {
        let c = cfg.law.value.unwrap_or(1.0);
        let exact = 0.25 / c;
        manifest.pass =
            Some((a_axis_1 - exact).abs() <= cfg.tolerances.potential_rel * exact);
        manifest.record("a_axis_1_exact", exact, 0.0);
    }
    Ok(manifest)
}

/// Scaled return density `t * p_t` along a time grid. For the constant
/// everywhere-open law the limit has the closed form 1/(4 pi c) under both
/// walk clocks, which gates the verdict.
pub fn run_llt(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("llt");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let times = cfg
        .times
        .clone()
        .unwrap_or_else(|| vec![10.0, 30.0, 100.0, 300.0, 1000.0]);
    let t0 = Instant::now();
    let env = StaticEnvironment::sample(law, cfg.window(), derived_seed(cfg.seed, PURPOSE_ENV, 0));
    let geo = ClusterGeometry::analyze(&env);
    let base = geo.nearest_cluster_point([0.0, 0.0], 1.0)?;
    let opts = HeatKernelOptions::default();
    let curve = install(ctx.threads, || {
        llt_curve(&env, speed, base, [0.0, 0.0], &times, Some(&geo), &opts)
    })??;
    manifest.wall_seconds.insert("curve".into(), t0.elapsed().as_secs_f64());
    let reference = if cfg.law.p_open == 1.0 && cfg.law.kind == LawKindSpec::Constant {
        Some(1.0 / (4.0 * PI * cfg.law.value.unwrap_or(1.0)))
    } else {
        None
    };
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|p| {
            vec![
                ff(p.t),
                p.target.x.to_string(),
                p.target.y.to_string(),
                ff(p.scaled_density),
                ff(p.leak),
                reference.map(ff).unwrap_or_default(),
            ]
        })
        .collect();
    write_table(
        &mut manifest,
        out_dir,
        "llt.csv",
        &["t", "target_x", "target_y", "scaled_density", "leak", "reference"],
        &rows,
    )?;
    let last = curve.last().expect("times validated non-empty");
    manifest.record("final_scaled_density", last.scaled_density, 0.0);
    if let Some(r) = reference {
        manifest.record("reference", r, 0.0);
        manifest.pass =
            Some((last.scaled_density - r).abs() <= cfg.tolerances.llt_rel * r);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// verification pipelines
// ---------------------------------------------------------------------------

struct AnnulusScan {
    sup: Vec<f64>,
    mean_a: Vec<f64>,
    skipped: usize,
}

/// Sup-deviation of the rescaled potential kernel over an annulus mesh:
/// for each radius `n` and mesh point `x`, evaluates `a(0, lambda_n(x))`
/// at the cluster point nearest `n x` and compares `a / ln n` with the
/// reference `gbar`. The deviation column must fall along the top half of
/// the grid, and the fitted slope of the mesh-averaged values against
/// `ln n` must agree with `gbar`; for constant laws the final deviation is
/// also capped.
///
/// All values for one environment come from a single ambient solve on the
/// open component inside the l-inf box of half-width `3 n_max`: every
/// target keeps at least a full `n_max` of margin, which holds the ambient
/// truncation error near `0.01 (|z| / m)^4` — two orders below the
/// deviation cap.
pub fn verify_thm12(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("thm12");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let n_grid = &cfg.n_grid;
    let n_max = *n_grid.last().unwrap();
    let ambient = 3 * n_max;
    let required = ambient + 2;
    if cfg.half_width < required {
        return Err(ConfigError::WindowTooSmall { required, given: cfg.half_width }.into());
    }
    let (annulus, mesh) = cfg.annulus.build()?;
    let targets = annulus_targets(annulus, mesh)?;

    let t0 = Instant::now();
    let gref = gbar_reference(ctx)?;
    manifest.wall_seconds.insert("gbar".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let window = cfg.window();
    let scans = install(ctx.threads, || -> Result<Vec<AnnulusScan>, HarnessError> {
        (0..cfg.num_envs as u64)
            .into_par_iter()
            .map(|e| {
                let env = StaticEnvironment::sample(
                    law,
                    window,
                    derived_seed(cfg.seed, PURPOSE_ENV, e),
                );
                let geo = ClusterGeometry::analyze(&env);
                let base = geo.nearest_cluster_point([0.0, 0.0], 1.0)?;
                let mut domain = box_component(&env, base, ambient)?;
                // membership by binary search: these domains run to
                // millions of sites and a hash set would double the memory
                domain.sort_unstable();
                let kg = killed_green(&env, speed, &domain, base)?;
                let g_base = kg.value(base);
                let mut sup = vec![0.0f64; n_grid.len()];
                let mut sum = vec![0.0f64; n_grid.len()];
                let mut count = vec![0usize; n_grid.len()];
                let mut skipped = 0usize;
                for (i, &n) in n_grid.iter().enumerate() {
                    let ln_n = (n as f64).ln();
                    for &x in &targets {
                        let lambda = geo.nearest_cluster_point(x, n as f64)?;
                        if domain.binary_search(&lambda).is_err() {
                            skipped += 1;
                            continue;
                        }
                        let a = g_base - kg.value(lambda);
                        let dev = (a / ln_n - gref.gbar).abs();
                        if dev > sup[i] {
                            sup[i] = dev;
                        }
                        sum[i] += a;
                        count[i] += 1;
                    }
                }
                if count.iter().any(|&c| c == 0) {
                    return Err(HarnessError::Data(
                        "an annulus radius had no connected mesh target".into(),
                    ));
                }
                let mean_a =
                    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
                Ok(AnnulusScan { sup, mean_a, skipped })
            })
            .collect()
    })??;
    manifest.wall_seconds.insert("scan".into(), t0.elapsed().as_secs_f64());

    let k = n_grid.len();
    let mut rows = Vec::with_capacity(k);
    let mut sup_dev = Vec::with_capacity(k);
    let mut mean_rows = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut mean_ses = Vec::with_capacity(k);
    for i in 0..k {
        let sups: Vec<f64> = scans.iter().map(|s| s.sup[i]).collect();
        let (sup_mean, _) = mean_se(&sups);
        sup_dev.push(sup_mean);
        rows.push(vec![
            n_grid[i].to_string(),
            ff(sup_mean),
            ff(gref.gbar),
            ff(gref.std_error),
        ]);
        let vals: Vec<f64> = scans.iter().map(|s| s.mean_a[i]).collect();
        let (m, se) = mean_se(&vals);
        means.push(m);
        mean_ses.push(se);
        mean_rows.push(vec![n_grid[i].to_string(), ff(m), ff(se)]);
    }
    let ln_ns: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let use_ses = scans.len() >= 2;
    let fit = line_fit(&ln_ns, &means, if use_ses { Some(&mean_ses) } else { None });
    let skipped: usize = scans.iter().map(|s| s.skipped).sum();

    write_table(
        &mut manifest,
        out_dir,
        "thm12.csv",
        &["n", "sup_dev", "gbar_hat", "gbar_err"],
        &rows,
    )?;
    write_table(
        &mut manifest,
        out_dir,
        "thm12_profile.csv",
        &["n", "mean_a", "mean_a_err"],
        &mean_rows,
    )?;

    let trend_ok = non_increasing(top_half(&sup_dev));
    let final_dev = *sup_dev.last().unwrap();
    let final_ok = final_dev < cfg.tolerances.sup_dev_cap * gref.gbar;
    let slope_ok = (fit.slope - gref.gbar).abs() <= cfg.tolerances.slope_rel * gref.gbar;
    let constant_law = cfg.law.p_open == 1.0 && cfg.law.kind == LawKindSpec::Constant;
    manifest.record("gbar_hat", gref.gbar, gref.std_error);
    manifest.record("slope_hat", fit.slope, fit.slope_se);
    manifest.record("intercept_hat", fit.intercept, 0.0);
    manifest.record("final_sup_dev", final_dev, 0.0);
    manifest.record("targets_skipped", skipped as f64, 0.0);
    manifest.record(
        "joint_slope_err",
        (fit.slope_se * fit.slope_se + gref.std_error * gref.std_error).sqrt(),
        0.0,
    );
    manifest.pass = Some(trend_ok && slope_ok && (!constant_law || final_ok));
    Ok(manifest)
}

struct OndiagRow {
    inner: f64,
    mid: f64,
    outer: f64,
    ratio: f64,
    ordered: bool,
}

/// On-diagonal killed Green growth: `g_{B(z,n)}(x,x) / ln n` along the
/// grid, with `x` at the center (`delta = 0`) or at distance `(1-delta) n`
/// from it. Each row also solves the two comparison balls `B(x, r_in)`
/// and `B(x, 2n)` and asserts the exact domain-monotonicity sandwich.
pub fn verify_thm13_ondiag(
    ctx: &RunContext,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("thm13-ondiag");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let n_grid = &cfg.n_grid;
    let n_max = *n_grid.last().unwrap();
    let delta = cfg.delta;
    let required = if delta == 0.0 {
        2 * n_max + 2
    } else {
        ((3.0 - delta) * n_max as f64).ceil() as i32 + 2
    };
    if cfg.half_width < required {
        return Err(ConfigError::WindowTooSmall { required, given: cfg.half_width }.into());
    }
    let gref = gbar_reference(ctx)?;

    let t0 = Instant::now();
    let window = cfg.window();
    let per_env = install(ctx.threads, || -> Result<Vec<Vec<Option<OndiagRow>>>, HarnessError> {
        (0..cfg.num_envs as u64)
            .into_par_iter()
            .map(|e| {
                let env = StaticEnvironment::sample(
                    law,
                    window,
                    derived_seed(cfg.seed, PURPOSE_ENV, e),
                );
                let geo = ClusterGeometry::analyze(&env);
                let base = geo.nearest_cluster_point([0.0, 0.0], 1.0)?;
                let mut rows: Vec<Option<OndiagRow>> = Vec::with_capacity(n_grid.len());
                for &n in n_grid {
                    let x = if delta == 0.0 {
                        base
                    } else {
                        geo.nearest_cluster_point([1.0 - delta, 0.0], n as f64)?
                    };
                    let main = component_in_ball(&env, base, n)?;
                    if !main.contains(&x) {
                        rows.push(None);
                        continue;
                    }
                    let inner_r = if delta == 0.0 {
                        (n / 2).max(2)
                    } else {
                        ((delta * n as f64 / 2.0).floor() as i32).max(2)
                    };
                    // The sandwich is only a theorem when the comparison
                    // balls nest inside / around the main one.
                    let off = base.l1(x) as i32;
                    if off + inner_r > n || off > n {
                        rows.push(None);
                        continue;
                    }
                    let kg_mid = killed_green(&env, speed, &main, x)?;
                    let g_mid = kg_mid.value(x);
                    let dom_in = component_in_ball(&env, x, inner_r)?;
                    let g_in = killed_green(&env, speed, &dom_in, x)?.value(x);
                    let dom_out = component_in_ball(&env, x, 2 * n)?;
                    let g_out = killed_green(&env, speed, &dom_out, x)?.value(x);
                    // exact up to the solver tolerance
                    let slack = 1e-8 * g_out.max(1.0);
                    let ordered = g_in <= g_mid + slack && g_mid <= g_out + slack;
                    rows.push(Some(OndiagRow {
                        inner: g_in,
                        mid: g_mid,
                        outer: g_out,
                        ratio: g_mid / (n as f64).ln(),
                        ordered,
                    }));
                }
                Ok(rows)
            })
            .collect()
    })??;
    manifest.wall_seconds.insert("solves".into(), t0.elapsed().as_secs_f64());

    // Exact growth of the killed Green value in the ball radius, per
    // environment, when the probe point stays fixed.
    let mut greens_increasing = true;
    if delta == 0.0 {
        for rows in &per_env {
            let mids: Vec<f64> = rows.iter().flatten().map(|r| r.mid).collect();
            if !mids.windows(2).all(|w| w[1] > w[0]) {
                greens_increasing = false;
            }
        }
    }

    let mut table = Vec::with_capacity(n_grid.len());
    let mut ratio_means = Vec::with_capacity(n_grid.len());
    let mut sandwich_ok = true;
    let mut ratio_final_se = 0.0;
    for (i, &n) in n_grid.iter().enumerate() {
        let rows: Vec<&OndiagRow> =
            per_env.iter().filter_map(|env_rows| env_rows[i].as_ref()).collect();
        if rows.is_empty() {
            return Err(HarnessError::Data(format!(
                "no environment connected the probe point at radius {n}"
            )));
        }
        sandwich_ok &= rows.iter().all(|r| r.ordered);
        let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
        let (ratio, ratio_se) = mean_se(&ratios);
        let greens: Vec<f64> = rows.iter().map(|r| r.mid).collect();
        let (green, green_se) = mean_se(&greens);
        let (inner, _) = mean_se(&rows.iter().map(|r| r.inner).collect::<Vec<_>>());
        let (outer, _) = mean_se(&rows.iter().map(|r| r.outer).collect::<Vec<_>>());
        ratio_means.push(ratio);
        ratio_final_se = ratio_se;
        table.push(vec![
            n.to_string(),
            ff(green),
            ff(green_se),
            ff(ratio),
            ff(ratio_se),
            ff(inner),
            ff(outer),
            ff(gref.gbar),
            ff(gref.std_error),
        ]);
    }
    write_table(
        &mut manifest,
        out_dir,
        "thm13_ondiag.csv",
        &[
            "n",
            "green",
            "green_err",
            "ratio",
            "ratio_err",
            "inner_green",
            "outer_green",
            "gbar_hat",
            "gbar_err",
        ],
        &table,
    )?;

    let final_ratio = *ratio_means.last().unwrap();
    let final_rel = (final_ratio - gref.gbar).abs() / gref.gbar;
    let monotone = strictly_decreasing(&ratio_means);
    manifest.record("final_ratio", final_ratio, ratio_final_se);
    manifest.record("final_rel_dev", final_rel, 0.0);
    manifest.record("gbar_hat", gref.gbar, gref.std_error);
    manifest.pass = Some(
        sandwich_ok
            && greens_increasing
            && monotone
            && final_rel <= cfg.tolerances.ondiag_rel,
    );
    Ok(manifest)
}

struct OffdiagScan {
    pairs: Vec<Vec<String>>,
    norm_res: Vec<f64>,
}

/// Off-diagonal killed Green values against the `gbar ln(n/|x-y|)`
/// profile: pairs at fractions {1/8, 1/4, 1/2} of the ball radius and
/// three directions, one solve per radius. The residual normalized by
/// `ln n` must fall along the top half of the grid.
pub fn verify_thm13_offdiag(
    ctx: &RunContext,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("thm13-offdiag");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let n_grid = &cfg.n_grid;
    let n_max = *n_grid.last().unwrap();
    let required = n_max + 2;
    if cfg.half_width < required {
        return Err(ConfigError::WindowTooSmall { required, given: cfg.half_width }.into());
    }
    let gref = gbar_reference(ctx)?;

    const FRACTIONS: [f64; 3] = [0.125, 0.25, 0.5];
    const ANGLES_DEG: [f64; 3] = [0.0, 45.0, 90.0];

    let t0 = Instant::now();
    let window = cfg.window();
    let scans = install(ctx.threads, || -> Result<Vec<OffdiagScan>, HarnessError> {
        (0..cfg.num_envs as u64)
            .into_par_iter()
            .map(|e| {
                let env = StaticEnvironment::sample(
                    law,
                    window,
                    derived_seed(cfg.seed, PURPOSE_ENV, e),
                );
                let geo = ClusterGeometry::analyze(&env);
                let base = geo.nearest_cluster_point([0.0, 0.0], 1.0)?;
                let mut pairs = Vec::new();
                let mut norm_res = Vec::with_capacity(n_grid.len());
                for &n in n_grid {
                    let domain = component_in_ball(&env, base, n)?;
                    let on_domain: HashSet<Site> = domain.iter().copied().collect();
                    let kg = killed_green(&env, speed, &domain, base)?;
                    let ln_n = (n as f64).ln();
                    let mut worst = 0.0f64;
                    let mut used: HashSet<Site> = HashSet::new();
                    for &f in &FRACTIONS {
                        for &deg in &ANGLES_DEG {
                            let d = f * n as f64;
                            if d < 1.0 {
                                continue;
                            }
                            let (s, c) = deg.to_radians().sin_cos();
                            let w = [base.x as f64 + d * c, base.y as f64 + d * s];
                            let x = geo.nearest_cluster_point(w, 1.0)?;
                            if x == base || !on_domain.contains(&x) || !used.insert(x) {
                                continue;
                            }
                            let dist = (((x.x - base.x) as f64).powi(2)
                                + ((x.y - base.y) as f64).powi(2))
                            .sqrt();
                            let green = kg.value(x);
                            let reference = gref.gbar * (n as f64 / dist).ln();
                            let residual = (green - reference).abs();
                            worst = worst.max(residual / ln_n);
                            pairs.push(vec![
                                e.to_string(),
                                n.to_string(),
                                ff(f),
                                ff(deg),
                                (x.x - base.x).to_string(),
                                (x.y - base.y).to_string(),
                                ff(dist),
                                ff(green),
                                ff(reference),
                                ff(residual),
                            ]);
                        }
                    }
                    norm_res.push(worst);
                }
                Ok(OffdiagScan { pairs, norm_res })
            })
            .collect()
    })??;
    manifest.wall_seconds.insert("solves".into(), t0.elapsed().as_secs_f64());

    let pair_rows: Vec<Vec<String>> =
        scans.iter().flat_map(|s| s.pairs.iter().cloned()).collect();
    write_table(
        &mut manifest,
        out_dir,
        "thm13_offdiag.csv",
        &["env", "n", "frac", "angle_deg", "dx", "dy", "dist", "green", "reference", "residual"],
        &pair_rows,
    )?;

    let mut trend_rows = Vec::with_capacity(n_grid.len());
    let mut norm_means = Vec::with_capacity(n_grid.len());
    for (i, &n) in n_grid.iter().enumerate() {
        let vals: Vec<f64> = scans.iter().map(|s| s.norm_res[i]).collect();
        let (m, se) = mean_se(&vals);
        norm_means.push(m);
        trend_rows.push(vec![n.to_string(), ff(m), ff(se)]);
    }
    write_table(
        &mut manifest,
        out_dir,
        "thm13_offdiag_trend.csv",
        &["n", "norm_res", "norm_res_err"],
        &trend_rows,
    )?;

    let trend_ok = non_increasing(top_half(&norm_means));
    manifest.record("final_norm_res", *norm_means.last().unwrap(), 0.0);
    manifest.record("gbar_hat", gref.gbar, gref.std_error);
    manifest.pass = Some(trend_ok);
    Ok(manifest)
}

/// Exit-identity check on small random domains: the killed Green value
/// must equal the exit-expectation combination of anchored potential
/// values, with the residual shrinking as the reference cutoff doubles.
pub fn verify_lemma22(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("lemma22");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let instances = 10u64;

    let t0 = Instant::now();
    let window = cfg.window();
    let half_width = cfg.half_width;
    let tol = cfg.tolerances.lemma22_residual;
    let rows = install(ctx.threads, || -> Result<Vec<Vec<String>>, HarnessError> {
        (0..instances)
            .into_par_iter()
            .map(|i| {
                let env = StaticEnvironment::sample(
                    law,
                    window,
                    derived_seed(cfg.seed, PURPOSE_INSTANCE, i),
                );
                let geo = ClusterGeometry::analyze(&env);
                let base = geo.nearest_cluster_point([0.0, 0.0], 1.0)?;
                let mut r = 2 + (i % 2) as i32;
                let mut a_set = component_in_ball(&env, base, r)?;
                while a_set.len() < 2 && r < 6 {
                    r += 1;
                    a_set = component_in_ball(&env, base, r)?;
                }
                if a_set.len() < 2 {
                    return Err(HarnessError::Data(format!(
                        "instance {i}: the open component at the origin is a single site"
                    )));
                }
                let diam = a_set
                    .iter()
                    .flat_map(|&a| a_set.iter().map(move |&b| a.l1(b)))
                    .max()
                    .unwrap() as i32;
                let x = base;
                let y = *a_set
                    .iter()
                    .filter(|&&s| s != x)
                    .max_by_key(|&&s| s.l1(x))
                    .unwrap();
                let n_ref = 16 * diam.max(1);
                let required = 2 * n_ref + 10;
                if half_width < required {
                    return Err(ConfigError::WindowTooSmall {
                        required,
                        given: half_width,
                    }
                    .into());
                }
                let rep = check_lemma22_identity(&env, speed, &a_set, x, y, n_ref)?;
                let rep2 = check_lemma22_identity(&env, speed, &a_set, x, y, 2 * n_ref)?;
                Ok(vec![
                    i.to_string(),
                    a_set.len().to_string(),
                    diam.to_string(),
                    x.x.to_string(),
                    x.y.to_string(),
                    y.x.to_string(),
                    y.y.to_string(),
                    n_ref.to_string(),
                    ff(rep.green_value),
                    ff(rep.exit_term),
                    ff(rep.a_term),
                    ff(rep.residual),
                    ff(rep2.residual),
                    ff(rep.error_budget),
                ])
            })
            .collect()
    })??;
    manifest.wall_seconds.insert("instances".into(), t0.elapsed().as_secs_f64());

    write_table(
        &mut manifest,
        out_dir,
        "lemma22.csv",
        &[
            "instance",
            "size",
            "diam",
            "x_x",
            "x_y",
            "y_x",
            "y_y",
            "n_ref",
            "green",
            "exit_term",
            "a_term",
            "residual",
            "residual_doubled",
            "error_budget",
        ],
        &rows,
    )?;

    let worst = rows
        .iter()
        .map(|r| r[11].parse::<f64>().unwrap())
        .fold(0.0f64, f64::max);
    let all_small = rows.iter().all(|r| r[11].parse::<f64>().unwrap() < tol);
    // Doubling the reference cutoff must not grow the residual — unless
    // both sit at the linear-solver floor, where the comparison is noise.
    let all_shrink = rows.iter().all(|r| {
        let r1: f64 = r[11].parse().unwrap();
        let r2: f64 = r[12].parse().unwrap();
        r2 <= r1.max(1e-9)
    });
    manifest.record("worst_residual", worst, 0.0);
    manifest.pass = Some(all_small && all_shrink);
    Ok(manifest)
}

/// Punctured-lattice identity check: the Green function of the lattice
/// minus the origin against the anchored-potential combination, with the
/// residual shrinking as the outer cutoff doubles and an exact zero at
/// the puncture.
pub fn verify_cor23(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("cor23");
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let instances = 10u64;
    // Scale-free identity: a fixed moderate cutoff keeps the doubled run
    // inside every admissible window.
    let n_outer = 32;
    let required = 2 * n_outer + 8;
    if cfg.half_width < required {
        return Err(ConfigError::WindowTooSmall { required, given: cfg.half_width }.into());
    }

    const OFFSETS: [[f64; 2]; 10] = [
        [2.0, 1.0],
        [-1.0, 2.0],
        [-2.0, -1.0],
        [1.0, -2.0],
        [3.0, 0.0],
        [0.0, 3.0],
        [2.0, -2.0],
        [-3.0, 1.0],
        [1.0, 3.0],
        [-2.0, 2.0],
    ];

    let t0 = Instant::now();
    let window = cfg.window();
    let rows = install(ctx.threads, || -> Result<Vec<Vec<String>>, HarnessError> {
        (0..instances)
            .into_par_iter()
            .map(|i| {
                // A percolating law can disconnect or isolate the origin;
                // such draws carry no information about the identity, so
                // step the instance seed until the probe pair connects.
                'attempt: for attempt in 0..8u64 {
                    let env = StaticEnvironment::sample(
                        law,
                        window,
                        derived_seed(cfg.seed, PURPOSE_INSTANCE, 100 + i * 16 + attempt),
                    );
                    let geo = ClusterGeometry::analyze(&env);
                    let x = match geo.nearest_cluster_point(OFFSETS[i as usize], 1.0) {
                        Ok(s) => s,
                        Err(_) => continue 'attempt,
                    };
                    let y = match geo
                        .nearest_cluster_point(OFFSETS[((i + 3) % 10) as usize], 1.0)
                    {
                        Ok(s) => s,
                        Err(_) => continue 'attempt,
                    };
                    if x == Site::ORIGIN || y == Site::ORIGIN || x == y {
                        continue 'attempt;
                    }
                    let rep = match check_corollary23(&env, speed, x, y, n_outer) {
                        Ok(r) => r,
                        Err(
                            PotentialError::NotConnected { .. }
                            | PotentialError::NotOnCluster(_)
                            | PotentialError::Operator(_),
                        ) => continue 'attempt,
                        Err(other) => return Err(other.into()),
                    };
                    let rep2 = check_corollary23(&env, speed, x, y, 2 * n_outer)?;
                    // The Green function vanishes identically at the
                    // removed site; read it off a solve on the punctured
                    // component to pin that down bit-exactly.
                    let mut punctured = component_in_ball(&env, Site::ORIGIN, n_outer)?;
                    punctured.retain(|&s| s != Site::ORIGIN);
                    let zero = killed_green(&env, speed, &punctured, x)?.value(Site::ORIGIN);
                    let limit_dev = rep
                        .limit_table
                        .iter()
                        .map(|row| (row.green - row.reference).abs())
                        .fold(0.0f64, f64::max);
                    return Ok(vec![
                        i.to_string(),
                        x.x.to_string(),
                        x.y.to_string(),
                        y.x.to_string(),
                        y.y.to_string(),
                        n_outer.to_string(),
                        ff(rep.residual),
                        ff(rep2.residual),
                        ff(rep.residual_diagonal),
                        ff(limit_dev),
                        ff(zero),
                        ff(rep.error_budget),
                    ]);
                }
                Err(HarnessError::Data(format!(
                    "instance {i}: no connected probe pair found in 8 attempts"
                )))
            })
            .collect()
    })??;
    manifest.wall_seconds.insert("instances".into(), t0.elapsed().as_secs_f64());

    write_table(
        &mut manifest,
        out_dir,
        "cor23.csv",
        &[
            "instance",
            "x_x",
            "x_y",
            "y_x",
            "y_y",
            "n_outer",
            "residual",
            "residual_doubled",
            "residual_diagonal",
            "limit_max_dev",
            "zero_at_puncture",
            "error_budget",
        ],
        &rows,
    )?;

    let shrink =
        rows.iter().all(|r| r[7].parse::<f64>().unwrap() <= r[6].parse::<f64>().unwrap());
    let zeros = rows.iter().all(|r| r[10] == "0");
    let worst = rows
        .iter()
        .map(|r| r[6].parse::<f64>().unwrap())
        .fold(0.0f64, f64::max);
    manifest.record("worst_residual", worst, 0.0);
    manifest.pass = Some(shrink && zeros);
    Ok(manifest)
}

/// Additive constant of the potential-kernel expansion for the constant
/// everywhere-open law: fits `C(x) = a(0,x) - gbar ln|x|` over a geometric
/// radius grid, checks octave-to-octave stability, and compares against an
/// independent discrete-time evaluation.
pub fn classical_constant(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("classical");
    if !(cfg.law.p_open == 1.0 && cfg.law.kind == LawKindSpec::Constant) {
        return Err(ConfigError::Value(
            "the expansion constant is only defined for the constant everywhere-open law"
                .into(),
        )
        .into());
    }
    let c = cfg.law.value.unwrap_or(1.0);
    let gbar = GBAR_UNIT / c;
    let law = cfg.law.build()?;
    let speed = cfg.speed_measure();
    let n_max = *cfg.n_grid.last().unwrap();
    let top_r = (n_max / 4).max(8);

    let t0 = Instant::now();
    let env = StaticEnvironment::sample(law, cfg.window(), derived_seed(cfg.seed, PURPOSE_ENV, 0));
    // Single ambient profile: at radius ratios of four and better the
    // truncation sits below 3e-4, far inside the 1% windows, while a
    // Richardson step would amplify the half profile's boundary error.
    let full = install(ctx.threads, || potential_profile(&env, speed, Site::ORIGIN, n_max))??;
    let half = potential_profile(&env, speed, Site::ORIGIN, (n_max / 2).max(2))?;
    manifest.wall_seconds.insert("profiles".into(), t0.elapsed().as_secs_f64());

    let mut radii = Vec::new();
    let mut r = 4.0f64;
    while r < top_r as f64 * 1.01 {
        radii.push(r);
        r *= std::f64::consts::SQRT_2;
    }
    let mut pts: Vec<Site> = Vec::new();
    let mut seen = HashSet::new();
    for &r in &radii {
        let axis = site(r.round() as i32, 0);
        let d = (r / std::f64::consts::SQRT_2).round() as i32;
        for cand in [axis, site(d, d)] {
            if cand != Site::ORIGIN && seen.insert(cand) {
                pts.push(cand);
            }
        }
    }

    let mut rows = Vec::new();
    let mut sample: Vec<(f64, f64)> = Vec::new(); // (realized radius, C)
    for &z in &pts {
        let Some(value) = full.based(z) else { continue };
        let delta = half.based(z).map(|h| (value - h).abs()).unwrap_or(f64::NAN);
        let radius = z.norm2();
        let constant = value - gbar * radius.ln();
        sample.push((radius, constant));
        rows.push(vec![
            z.x.to_string(),
            z.y.to_string(),
            ff(radius),
            ff(value),
            ff(delta),
            ff(constant),
        ]);
    }
    write_table(
        &mut manifest,
        out_dir,
        "classical.csv",
        &["x", "y", "radius", "value", "richardson_delta", "constant"],
        &rows,
    )?;

    let octave_mean = |lo: f64, hi: f64| {
        let vals: Vec<f64> =
            sample.iter().filter(|(r, _)| *r > lo && *r <= hi).map(|(_, c)| *c).collect();
        mean_se(&vals).0
    };
    let c_top = octave_mean(top_r as f64 / 2.0, top_r as f64 * 1.01);
    let c_prev = octave_mean(top_r as f64 / 4.0, top_r as f64 / 2.0);
    let stability = (c_top - c_prev).abs() / c_top.abs();

    // Independent route: exact discrete-time partial sums at moderate
    // radii, where the truncation is provably negligible, scaled by the
    // conductance level.
    let t0 = Instant::now();
    let oracle_pts = [[16, 0], [23, 0], [11, 11], [16, 16]];
    let oracle_a = classical_potential(&oracle_pts, 16384);
    let c_oracle = oracle_pts
        .iter()
        .zip(&oracle_a)
        .map(|(&[x, y], a)| {
            let r = (((x * x + y * y) as f64).sqrt()).ln();
            a / c - gbar * r
        })
        .sum::<f64>()
        / oracle_pts.len() as f64;
    manifest.wall_seconds.insert("oracle".into(), t0.elapsed().as_secs_f64());

    // With the lower fit cutoff doubling, the worst misfit must shrink:
    // the correction to the expansion dies like an inverse square.
    let mut fit_residuals = Vec::new();
    for r_lo in [top_r as f64 / 8.0, top_r as f64 / 4.0, top_r as f64 / 2.0] {
        let included: Vec<f64> =
            sample.iter().filter(|(r, _)| *r >= r_lo - 0.01).map(|(_, c)| *c).collect();
        let (fit, _) = mean_se(&included);
        let worst =
            included.iter().map(|c| (c - fit).abs()).fold(0.0f64, f64::max);
        fit_residuals.push(worst);
    }

    let stable = stability < cfg.tolerances.classical_rel;
    let oracle_ok = (c_top - c_oracle).abs() < cfg.tolerances.classical_rel * c_oracle.abs();
    let resid_ok = non_increasing(&fit_residuals);
    manifest.record("c_hat", c_top, 0.0);
    manifest.record("c_prev_octave", c_prev, 0.0);
    manifest.record("c_oracle", c_oracle, 0.0);
    manifest.record("stability_rel", stability, 0.0);
    manifest.pass = Some(stable && oracle_ok && resid_ok);
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// dynamic pipelines
// ---------------------------------------------------------------------------

/// Annealed-kernel diagnostics for a dynamic law: the decay of the maximal
/// nearest-neighbour gradient over a time grid (fitted log-log slope must
/// sit in the configured band around the diffusive -3/2) and the annealed
/// potential at short separations.
pub fn run_dynamic_annealed(
    ctx: &RunContext,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("dynamic-annealed");
    let dspec = cfg
        .dynamic
        .as_ref()
        .ok_or(ConfigError::MissingSection("dynamic"))?;
    let dlaw = dspec.build(cfg.window(), cfg.interface.as_ref())?;
    let times = cfg
        .times
        .clone()
        .unwrap_or_else(|| vec![10.0, 30.0, 100.0, 300.0, 1000.0]);
    let t_max = *times.last().unwrap();
    let required = required_half_width(&dlaw, t_max, 0);
    if cfg.half_width < required {
        return Err(ConfigError::WindowTooSmall { required, given: cfg.half_width }.into());
    }
    let m_env = cfg.num_envs.max(2);

    let t0 = Instant::now();
    let points = install(ctx.threads, || {
        annealed_gradient_curve(&dlaw, &times, m_env, derived_seed(cfg.seed, PURPOSE_DYNAMIC, 0))
    })??;
    manifest.wall_seconds.insert("gradient".into(), t0.elapsed().as_secs_f64());

    let grad_rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                ff(p.t),
                ff(p.gradient),
                ff(p.std_error),
                p.edge.0.x.to_string(),
                p.edge.0.y.to_string(),
                p.edge.1.x.to_string(),
                p.edge.1.y.to_string(),
            ]
        })
        .collect();
    write_table(
        &mut manifest,
        out_dir,
        "dynamic_gradient.csv",
        &["t", "gradient", "std_error", "from_x", "from_y", "to_x", "to_y"],
        &grad_rows,
    )?;

    let slope = log_log_slope(
        &points.iter().map(|p| (p.t, p.gradient)).collect::<Vec<_>>(),
    );

    let targets: Vec<Site> = dspec
        .targets
        .clone()
        .unwrap_or_else(|| vec![[1, 0], [2, 0], [4, 0], [8, 0]])
        .into_iter()
        .map(|[x, y]| site(x, y))
        .collect();
    let t0 = Instant::now();
    let pot_rows = install(ctx.threads, || -> Result<Vec<Vec<String>>, HarnessError> {
        targets
            .par_iter()
            .enumerate()
            .map(|(ti, &x)| {
                let est = annealed_potential(
                    &dlaw,
                    x,
                    dspec.t_cut,
                    m_env,
                    derived_seed(cfg.seed, PURPOSE_DYNAMIC, 1 + ti as u64),
                )?;
                Ok(vec![
                    x.x.to_string(),
                    x.y.to_string(),
                    ff(est.value),
                    ff(est.std_error),
                    ff(est.leak),
                    ff(est.tail_indicator.unwrap_or(f64::NAN)),
                ])
            })
            .collect()
    })??;
    manifest.wall_seconds.insert("potential".into(), t0.elapsed().as_secs_f64());
    write_table(
        &mut manifest,
        out_dir,
        "dynamic_potential.csv",
        &["x", "y", "value", "std_error", "leak", "tail_indicator"],
        &pot_rows,
    )?;

    let lo = cfg.tolerances.gradient_slope_lo;
    let hi = cfg.tolerances.gradient_slope_hi;
    manifest.record("gradient_slope", slope, 0.0);
    manifest.pass = Some(slope >= lo && slope <= hi);
    Ok(manifest)
}

fn scaling_rows(scaling: &VarianceScaling) -> Vec<Vec<String>> {
    scaling
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                ff(r.variance),
                ff(r.std_error),
                ff(r.step_gap),
                ff(r.gaussian_oracle),
            ]
        })
        .collect()
}

/// Interface-model variance scaling: long-run Langevin estimates of the
/// height-increment variances over the separation grid. For the quadratic
/// potential every row is checked against the exact Gaussian value within
/// the Monte Carlo plus step-extrapolation budget; for anharmonic
/// potentials the run reports values and checks stationarity only.
pub fn run_dynamic_interface(
    ctx: &RunContext,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("dynamic-interface");
    let iface = cfg
        .interface
        .as_ref()
        .ok_or(ConfigError::MissingSection("interface"))?;
    let potential = iface.potential()?;

    let t0 = Instant::now();
    let scaling = install(ctx.threads, || {
        variance_scaling(
            potential,
            iface.tilt,
            iface.side,
            &iface.separations,
            iface.burn_in,
            iface.sample_time,
            derived_seed(cfg.seed, PURPOSE_INTERFACE, 0),
        )
    })??;
    manifest.wall_seconds.insert("langevin".into(), t0.elapsed().as_secs_f64());

    write_table(
        &mut manifest,
        out_dir,
        "interface_variance.csv",
        &["n", "variance", "std_error", "step_gap", "gaussian_oracle"],
        &scaling_rows(&scaling),
    )?;

    manifest.record("fitted_slope", scaling.fitted_slope, scaling.slope_std_error);
    manifest.record("drift_flag", if scaling.drift_flag { 1.0 } else { 0.0 }, 0.0);
    let quadratic = iface.epsilon == 0.0;
    let pass = if quadratic {
        let budget_ok = scaling.rows.iter().all(|r| {
            (r.variance - r.gaussian_oracle).abs()
                <= cfg.tolerances.mc_sigma * r.std_error + 0.25 * r.step_gap
        });
        // The exact values computed on the same torus and grid carry the
        // same finite-size curvature, so their fitted slope is the fair
        // reference at any side.
        let ln_ns: Vec<f64> =
            scaling.rows.iter().map(|r| (r.n as f64).ln()).collect();
        let oracle: Vec<f64> = scaling.rows.iter().map(|r| r.gaussian_oracle).collect();
        let oracle_fit = line_fit(&ln_ns, &oracle, None);
        manifest.record("oracle_slope", oracle_fit.slope, 0.0);
        let slope_ok = (scaling.fitted_slope - oracle_fit.slope).abs()
            <= cfg.tolerances.slope_rel * oracle_fit.slope;
        budget_ok && slope_ok && !scaling.drift_flag
    } else {
        !scaling.drift_flag && scaling.rows.iter().all(|r| r.variance.is_finite())
    };
    manifest.pass = Some(pass);
    Ok(manifest)
}

/// The homogeneous dynamic-potential instance: quadratic-potential
/// variance scaling on a large torus, the fitted slope against 1/pi, and
/// the consistency between stationary increment variances and twice the
/// annealed potential kernel of the unit environment.
pub fn run_dynamic_thm34(ctx: &RunContext, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("dynamic-thm34");
    let iface = cfg
        .interface
        .as_ref()
        .ok_or(ConfigError::MissingSection("interface"))?;
    if iface.epsilon != 0.0 {
        return Err(ConfigError::Value(
            "the homogeneous instance needs the quadratic potential (epsilon = 0)".into(),
        )
        .into());
    }

    let t0 = Instant::now();
    let scaling = install(ctx.threads, || {
        variance_scaling(
            crate::dynamic::Potential::Quadratic,
            iface.tilt,
            iface.side,
            &iface.separations,
            iface.burn_in,
            iface.sample_time,
            derived_seed(cfg.seed, PURPOSE_INTERFACE, 0),
        )
    })??;
    manifest.wall_seconds.insert("langevin".into(), t0.elapsed().as_secs_f64());
    write_table(
        &mut manifest,
        out_dir,
        "thm34_variance.csv",
        &["n", "variance", "std_error", "step_gap", "gaussian_oracle"],
        &scaling_rows(&scaling),
    )?;

    let budget_ok = scaling.rows.iter().all(|r| {
        (r.variance - r.gaussian_oracle).abs()
            <= cfg.tolerances.mc_sigma * r.std_error + 0.25 * r.step_gap
    });
    let target_slope = 1.0 / PI;
    let slope_ok = (scaling.fitted_slope - target_slope).abs()
        <= cfg.tolerances.slope_rel * target_slope;

    // Stationary increment variances against twice the potential kernel of
    // the unit static environment (the curvature field of the quadratic
    // potential is identically one, so its annealed walk is that walk).
    let t0 = Instant::now();
    let env = StaticEnvironment::sample(
        ConductanceLaw::homogeneous(),
        Window::new(66),
        derived_seed(cfg.seed, PURPOSE_ENV, 0),
    );
    let full = potential_profile(&env, cfg.speed_measure(), Site::ORIGIN, 64)?;
    let half = potential_profile(&env, cfg.speed_measure(), Site::ORIGIN, 32)?;
    manifest.wall_seconds.insert("abar".into(), t0.elapsed().as_secs_f64());

    let mut hs_rows = Vec::new();
    let mut hs_ok = true;
    for row in scaling.rows.iter().filter(|r| r.n <= 8) {
        let Some((abar, abar_delta)) = based_extrapolate(&full, &half, site(row.n, 0)) else {
            continue;
        };
        let two_abar = 2.0 * abar;
        // Triangle budget: Monte Carlo error, step-extrapolation residual,
        // potential-profile extrapolation change, and the exact gap
        // between the finite torus and the full lattice.
        let budget = cfg.tolerances.mc_sigma * row.std_error
            + 0.25 * row.step_gap
            + 2.0 * abar_delta
            + (row.gaussian_oracle - two_abar).abs();
        let deviation = (row.variance - two_abar).abs();
        hs_ok &= deviation <= budget;
        hs_rows.push(vec![
            row.n.to_string(),
            ff(row.variance),
            ff(row.std_error),
            ff(row.step_gap),
            ff(row.gaussian_oracle),
            ff(two_abar),
            ff(2.0 * abar_delta),
            ff(budget),
            ff(deviation),
        ]);
    }
    if hs_rows.is_empty() {
        return Err(HarnessError::Data(
            "no separation at or below 8 in the interface grid".into(),
        ));
    }
    write_table(
        &mut manifest,
        out_dir,
        "thm34_hs.csv",
        &[
            "n",
            "variance",
            "std_error",
            "step_gap",
            "torus_oracle",
            "two_abar",
            "abar_delta",
            "budget",
            "deviation",
        ],
        &hs_rows,
    )?;

    manifest.record("fitted_slope", scaling.fitted_slope, scaling.slope_std_error);
    manifest.record("target_slope", target_slope, 0.0);
    manifest.record("drift_flag", if scaling.drift_flag { 1.0 } else { 0.0 }, 0.0);
    manifest.pass = Some(budget_ok && slope_ok && hs_ok && !scaling.drift_flag);
    Ok(manifest)
}
