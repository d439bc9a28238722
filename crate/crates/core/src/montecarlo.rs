//! Exact trajectory simulation and Monte Carlo estimators.
//!
//! The walk is simulated event by event: at a site `x` it waits an
//! exponential time with rate `mu(x)/theta(x)` and then jumps to a
//! neighbour chosen with probability `w({x,y})/mu(x)`. This is exact in
//! law — the only approximations downstream are statistical.
//!
//! Estimators built on top:
//!
//! * `estimate_sigma` — the covariance `Sigma^2` of the diffusive limit,
//!   from `X_T X_T^T / T` averaged over environments and walks, with
//!   jackknife standard errors over environments;
//! * `gbar_from` — the plug-in `gbar = 1/(pi sqrt(det Sigma^2) theta)`
//!   with first-order error propagation;
//! * `exit_statistics` — exit times and exit sites of a finite domain,
//!   the Monte Carlo mirror of the solver-based Dirichlet quantities.
//!
//! Walks that reach the window frame are aborted and flagged, never
//! silently truncated: estimators exclude them and fail loudly if the
//! aborted fraction exceeds a leak budget.

use crate::environment::{ConductanceField, EnvironmentError, SpeedMeasure};
use crate::lattice::{neighbors, Edge, Site, Window};
use crate::percolation::{ClusterGeometry, PercolationError, ThetaEstimate};
use crate::rng::Stream;
use crate::environment::ConductanceLaw;
use rand::Rng;
use serde::Serialize;

/// Fraction of walks allowed to touch the window frame before the
/// estimator refuses to report.
pub const LEAK_BUDGET: f64 = 1e-3;

const WALK_TAG: u64 = 0x57A1_4B0C;

/// One simulated path: jump times with the sites jumped to.
#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub start: Site,
    pub horizon: f64,
    pub seed: u64,
    /// `(time, site)` for each jump, in increasing time order.
    pub jumps: Vec<(f64, Site)>,
    /// The walk reached the window-adjacent frame before the horizon and
    /// was stopped there; estimators must skip it.
    pub aborted: bool,
}

impl Trajectory {
    /// Site occupied at time `t` (the start site before the first jump).
    pub fn position(&self, t: f64) -> Site {
        let mut s = self.start;
        for &(tau, site) in &self.jumps {
            if tau > t {
                break;
            }
            s = site;
        }
        s
    }

    pub fn end_position(&self) -> Site {
        self.jumps.last().map(|&(_, s)| s).unwrap_or(self.start)
    }

    pub fn num_jumps(&self) -> usize {
        self.jumps.len()
    }
}

/// Exact simulation of the walk from `x0` until `horizon` (or frame
/// contact). Identical arguments give the identical trajectory.
pub fn simulate<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    x0: Site,
    horizon: f64,
    seed: u64,
) -> Result<Trajectory, MonteCarloError> {
    if !(horizon >= 0.0) {
        return Err(MonteCarloError::BadHorizon(horizon));
    }
    let hw = env.half_width();
    let frame = |s: Site| s.x.abs() >= hw || s.y.abs() >= hw;
    if frame(x0) {
        return Err(MonteCarloError::StartOnFrame(x0));
    }

    let mut stream = Stream::keyed(seed, &[WALK_TAG, zig(x0.x), zig(x0.y)]);
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut site = x0;
    let mut aborted = false;

    loop {
        let mut w = [0.0f64; 4];
        let nbs = neighbors(site);
        let mut mu = 0.0;
        for (i, &nb) in nbs.iter().enumerate() {
            let c = env.conductance(Edge::between(site, nb))?;
            w[i] = c;
            mu += c;
        }
        if mu <= 0.0 {
            break; // isolated: the walk sits here forever
        }
        let rate = mu / env.theta(site, speed)?;
        t += stream.next_exp(rate);
        if t > horizon {
            break;
        }
        // jump proportional to the incident conductances
        let mut u = stream.next_f64() * mu;
        let mut chosen = nbs[3];
        for (i, &nb) in nbs.iter().enumerate() {
            if u < w[i] {
                chosen = nb;
                break;
            }
            u -= w[i];
        }
        site = chosen;
        jumps.push((t, site));
        if frame(site) {
            aborted = true;
            break;
        }
    }

    Ok(Trajectory { start: x0, horizon, seed, jumps, aborted })
}

fn zig(v: i32) -> u64 {
    ((v as i64) << 1 ^ ((v as i64) >> 63)) as u64
}

/// Covariance estimate of the diffusive limit with its provenance.
#[derive(Clone, Debug, Serialize)]
pub struct SigmaEstimate {
    /// `Sigma_hat^2`, symmetric 2x2.
    pub matrix: [[f64; 2]; 2],
    /// Jackknife standard errors per entry (over environments).
    pub std_error: [[f64; 2]; 2],
    pub num_envs: usize,
    pub walks_per_env: usize,
    pub horizon: f64,
    pub aborted_fraction: f64,
}

/// Estimates `Sigma^2 = lim E[X_T X_T^T]/T` for the walk, averaging over
/// `m_env` fresh environments and `m_walk` walks each. Start sites are the
/// conditioning-by-rejection choice: uniform over giant-cluster sites near
/// the window center.
pub fn estimate_sigma(
    law: ConductanceLaw,
    speed: SpeedMeasure,
    horizon: f64,
    m_env: usize,
    m_walk: usize,
    window: Window,
    seed: u64,
) -> Result<SigmaEstimate, MonteCarloError> {
    use crate::environment::StaticEnvironment;
    if m_env == 0 || m_walk == 0 {
        return Err(MonteCarloError::NoSamples);
    }
    let mut env_means: Vec<[[f64; 2]; 2]> = Vec::with_capacity(m_env);
    let mut aborted = 0usize;
    let mut total = 0usize;

    for e in 0..m_env {
        let env_seed = seed.wrapping_add(e as u64);
        let env = StaticEnvironment::sample(law, window, env_seed);
        let geom = ClusterGeometry::analyze(&env);
        let x0 = central_cluster_site(&geom, window, env_seed)?;

        let mut acc = [[0.0f64; 2]; 2];
        let mut kept = 0usize;
        for wlk in 0..m_walk {
            let walk_seed =
                Stream::keyed(seed, &[0xE57, e as u64, wlk as u64]).next_u64();
            let tr = simulate(&env, speed, x0, horizon, walk_seed)?;
            total += 1;
            if tr.aborted {
                aborted += 1;
                continue;
            }
            let d = tr.end_position() - x0;
            let v = [d.x as f64, d.y as f64];
            for i in 0..2 {
                for j in 0..2 {
                    acc[i][j] += v[i] * v[j] / horizon;
                }
            }
            kept += 1;
        }
        if kept == 0 {
            return Err(MonteCarloError::ExcessiveLeak {
                fraction: 1.0,
                budget: LEAK_BUDGET,
            });
        }
        for row in acc.iter_mut() {
            for v in row.iter_mut() {
                *v /= kept as f64;
            }
        }
        env_means.push(acc);
    }

    let aborted_fraction = aborted as f64 / total as f64;
    if aborted_fraction > LEAK_BUDGET {
        return Err(MonteCarloError::ExcessiveLeak {
            fraction: aborted_fraction,
            budget: LEAK_BUDGET,
        });
    }

    let mut matrix = [[0.0f64; 2]; 2];
    for m in &env_means {
        for i in 0..2 {
            for j in 0..2 {
                matrix[i][j] += m[i][j] / m_env as f64;
            }
        }
    }
    // leave-one-out jackknife standard errors
    let mut std_error = [[0.0f64; 2]; 2];
    if m_env > 1 {
        let mf = m_env as f64;
        for i in 0..2 {
            for j in 0..2 {
                let mut ss = 0.0;
                for m in &env_means {
                    // leave-one-out mean = (sum - m)/(M-1); deviation from
                    // the full mean is (mean - m)/(M-1)
                    let dev = (matrix[i][j] - m[i][j]) / (mf - 1.0);
                    ss += dev * dev;
                }
                std_error[i][j] = ((mf - 1.0) / mf * ss).sqrt() * (mf - 1.0);
            }
        }
    }

    Ok(SigmaEstimate {
        matrix,
        std_error,
        num_envs: m_env,
        walks_per_env: m_walk,
        horizon,
        aborted_fraction,
    })
}

/// Uniform draw from the giant-cluster sites inside the central ninth of
/// the window (rejection sampling with a deterministic stream).
fn central_cluster_site(
    geom: &ClusterGeometry,
    window: Window,
    seed: u64,
) -> Result<Site, MonteCarloError> {
    let b = (window.half_width() / 3).max(1);
    let mut stream = Stream::keyed(seed, &[0x0C44, b as u64]);
    for _ in 0..100_000 {
        let s = Site {
            x: stream.random_range(-b..=b),
            y: stream.random_range(-b..=b),
        };
        if geom.on_giant(s) {
            return Ok(s);
        }
    }
    Err(MonteCarloError::NoClusterStart)
}

/// Logarithmic-slope constant from plug-in pieces.
#[derive(Clone, Debug, Serialize)]
pub struct GbarEstimate {
    pub gbar: f64,
    pub std_error: f64,
}

/// `gbar = 1 / (pi sqrt(det Sigma^2) theta)` with first-order error
/// propagation from the entry-wise covariance errors and the cluster
/// density error.
pub fn gbar_from(
    sigma: &SigmaEstimate,
    theta_hat: &ThetaEstimate,
) -> Result<GbarEstimate, MonteCarloError> {
    let m = &sigma.matrix;
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(det > 0.0) {
        return Err(MonteCarloError::DegenerateSigma(det));
    }
    let theta = theta_hat.theta_hat;
    if !(theta > 0.0) {
        return Err(MonteCarloError::DegenerateTheta(theta));
    }
    let gbar = 1.0 / (std::f64::consts::PI * det.sqrt() * theta);

    // det = ad - bc: first-order variance from independent entry errors
    let e = &sigma.std_error;
    let var_det = (m[1][1] * e[0][0]).powi(2)
        + (m[0][0] * e[1][1]).powi(2)
        + (m[1][0] * e[0][1]).powi(2)
        + (m[0][1] * e[1][0]).powi(2);
    let rel = (var_det / (4.0 * det * det)
        + (theta_hat.std_error / theta).powi(2))
    .sqrt();
    Ok(GbarEstimate { gbar, std_error: gbar * rel })
}

/// Monte Carlo exit data for a finite domain.
#[derive(Clone, Debug, Serialize)]
pub struct ExitStatistics {
    pub mean_exit_time: f64,
    pub exit_time_std_error: f64,
    /// Exit sites with raw counts and fractions, sorted by site.
    pub histogram: Vec<ExitBin>,
    pub num_walks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExitBin {
    pub site: Site,
    pub count: u64,
    pub fraction: f64,
}

/// Runs `m_walk` independent walks from `x0` until each leaves `a_set`,
/// recording exit times and exit sites. The domain must lie in the window
/// interior, so walks can never reach the frame before exiting.
pub fn exit_statistics<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    x0: Site,
    a_set: &[Site],
    m_walk: usize,
    seed: u64,
) -> Result<ExitStatistics, MonteCarloError> {
    use std::collections::{HashMap, HashSet};
    if m_walk == 0 {
        return Err(MonteCarloError::NoSamples);
    }
    let domain: HashSet<Site> = a_set.iter().copied().collect();
    if !domain.contains(&x0) {
        return Err(MonteCarloError::StartOutsideDomain(x0));
    }
    let hw = env.half_width();
    for &s in a_set {
        if s.x.abs() >= hw || s.y.abs() >= hw {
            return Err(MonteCarloError::StartOnFrame(s));
        }
    }

    let mut times = Vec::with_capacity(m_walk);
    let mut hist: HashMap<Site, u64> = HashMap::new();
    for wlk in 0..m_walk {
        let mut stream =
            Stream::keyed(seed, &[0xEC17, wlk as u64, zig(x0.x), zig(x0.y)]);
        let mut t = 0.0;
        let mut site = x0;
        loop {
            let nbs = neighbors(site);
            let mut w = [0.0f64; 4];
            let mut mu = 0.0;
            for (i, &nb) in nbs.iter().enumerate() {
                let c = env.conductance(Edge::between(site, nb))?;
                w[i] = c;
                mu += c;
            }
            if mu <= 0.0 {
                return Err(MonteCarloError::StuckInDomain(site));
            }
            let rate = mu / env.theta(site, speed)?;
            t += stream.next_exp(rate);
            let mut u = stream.next_f64() * mu;
            let mut chosen = nbs[3];
            for (i, &nb) in nbs.iter().enumerate() {
                if u < w[i] {
                    chosen = nb;
                    break;
                }
                u -= w[i];
            }
            site = chosen;
            if !domain.contains(&site) {
                times.push(t);
                *hist.entry(site).or_insert(0) += 1;
                break;
            }
        }
    }

    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut histogram: Vec<ExitBin> = hist
        .into_iter()
        .map(|(site, count)| ExitBin {
            site,
            count,
            fraction: count as f64 / n,
        })
        .collect();
    histogram.sort_by_key(|b| (b.site.x, b.site.y));

    Ok(ExitStatistics {
        mean_exit_time: mean,
        exit_time_std_error: (var / n).sqrt(),
        histogram,
        num_walks: m_walk,
    })
}

#[derive(thiserror::Error, Debug)]
pub enum MonteCarloError {
    #[error("horizon {0} is not a finite nonnegative number")]
    BadHorizon(f64),
    #[error("start {0} lies on the window frame; enlarge the window")]
    StartOnFrame(Site),
    #[error("start {0} is outside the domain")]
    StartOutsideDomain(Site),
    #[error("site {0} has no open edge but the walk must leave the domain")]
    StuckInDomain(Site),
    #[error("no giant-cluster site found near the window center")]
    NoClusterStart,
    #[error("no samples requested")]
    NoSamples,
    #[error(
        "{fraction:.2e} of walks reached the window frame (budget {budget:.0e}); raise the window half-width or lower the horizon"
    )]
    ExcessiveLeak { fraction: f64, budget: f64 },
    #[error("estimated covariance is not positive definite (det = {0})")]
    DegenerateSigma(f64),
    #[error("cluster density must be positive, got {0}")]
    DegenerateTheta(f64),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Percolation(#[from] PercolationError),
}
