//! Heat kernels by uniformization.
//!
//! The transition density of the walk with speed measure `theta` is
//!
//! ```text
//! p_t(x, y) = P_x[X_t = y] / theta(y),
//! ```
//!
//! which is symmetric in `(x, y)`. It is computed by uniformizing the
//! generator at a rate `lambda >= max_x mu(x)/theta(x)`: the walk observed
//! at the arrival times of a rate-`lambda` Poisson clock is a discrete
//! chain with kernel `P = I + L/lambda`, so
//!
//! ```text
//! P_x[X_t = y] = sum_k  e^{-lambda t} (lambda t)^k / k!  P^k(x, y).
//! ```
//!
//! Poisson weights are built in log space (the raw factor `e^{-lambda t}`
//! underflows long before the mixture does) and the series is truncated
//! once the remaining tail is below a tolerance. The chain itself lives on
//! a finite patch of the lattice with killing at the patch boundary; the
//! absorbed mass is tracked exactly and the patch is regrown until that
//! Dirichlet leak drops below a budget, so every reported value comes with
//! a certified error bound `leak + tail`.

use crate::environment::{ConductanceField, EnvironmentError, SpeedMeasure};
use crate::lattice::Site;
use crate::operator::{Generator, OperatorError};
use crate::percolation::{component_in_ball, ClusterGeometry, PercolationError};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

/// Relative mass of the Poisson mixture allowed to be dropped.
pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-10;

/// Probability mass allowed to be absorbed at the patch boundary.
pub const DEFAULT_LEAK_BUDGET: f64 = 1e-8;

/// Controls for the uniformization engine.
#[derive(Clone, Debug)]
pub struct HeatKernelOptions {
    /// Poisson-tail truncation tolerance.
    pub tail_tolerance: f64,
    /// Acceptable Dirichlet leak; the patch grows until it is met.
    pub leak_budget: f64,
    /// Hard cap on the patch radius (defaults to the window interior).
    pub max_radius: Option<i32>,
}

impl Default for HeatKernelOptions {
    fn default() -> Self {
        HeatKernelOptions {
            tail_tolerance: DEFAULT_TAIL_TOLERANCE,
            leak_budget: DEFAULT_LEAK_BUDGET,
            max_radius: None,
        }
    }
}

/// Distribution of the walk at one time, with certified error bounds.
#[derive(Debug)]
pub struct HeatProfile {
    sites: Vec<Site>,
    index: std::collections::HashMap<Site, u32>,
    probability: Vec<f64>,
    theta: Vec<f64>,
    pub t: f64,
    pub source: Site,
    pub lambda: f64,
    /// Mass absorbed at the patch boundary by time `t`.
    pub leak: f64,
    /// Poisson mass beyond the truncation point.
    pub tail: f64,
    pub poisson_terms: usize,
    pub radius: i32,
}

impl HeatProfile {
    /// `P_source[X_t = y]`; zero for `y` off the patch (true values there
    /// are bounded by the leak).
    pub fn probability(&self, y: Site) -> f64 {
        self.index
            .get(&y)
            .map(|&i| self.probability[i as usize])
            .unwrap_or(0.0)
    }

    /// Transition density `p_t(source, y)`.
    pub fn density(&self, y: Site) -> f64 {
        self.index
            .get(&y)
            .map(|&i| self.probability[i as usize] / self.theta[i as usize])
            .unwrap_or(0.0)
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probability
    }

    /// Total mass still on the patch; `1 - leak - tail` up to rounding.
    pub fn mass(&self) -> f64 {
        self.probability.iter().sum()
    }
}

/// One point of the kernel with its error certificate.
#[derive(Clone, Debug, Serialize)]
pub struct HeatKernelPoint {
    pub t: f64,
    pub x: Site,
    pub y: Site,
    pub density: f64,
    pub probability: f64,
    pub leak: f64,
    pub tail: f64,
    pub lambda: f64,
    pub poisson_terms: usize,
    pub radius: i32,
}

/// One point of a local-limit curve: the kernel at a diffusively scaled
/// target, multiplied by `t`.
#[derive(Clone, Debug, Serialize)]
pub struct LltPoint {
    pub t: f64,
    /// Site actually probed (the rounded or cluster-adjusted target).
    pub target: Site,
    /// Where the target was meant to be, in lattice units.
    pub requested: [f64; 2],
    /// `t * p_t(source, target)`.
    pub scaled_density: f64,
    pub leak: f64,
}

/// Sup-distance between the scaled kernel and the Gaussian it should
/// approach.
#[derive(Clone, Debug, Serialize)]
pub struct GaussianDiagnostic {
    pub t: f64,
    pub sigma_sq: f64,
    /// `sup |t p_t(0, z) - k(z/sqrt(t))|` over `|z| <= horizon sqrt(t)`.
    pub sup_deviation: f64,
    pub argmax: Site,
    pub num_targets: usize,
    pub leak: f64,
}

/// Smallest Poisson-series length with tail below `tol`, padded well past
/// the `12 sigma` point so the bound holds with a wide margin.
fn poisson_length(lambda_t: f64, _tol: f64) -> usize {
    (lambda_t + 12.0 * (lambda_t + 1.0).sqrt() + 35.0).ceil() as usize
}

/// Poisson(lambda_t) weights `w_0 .. w_{k_max}` via log-space evaluation.
pub(crate) fn poisson_weights(lambda_t: f64, k_max: usize) -> Vec<f64> {
    if lambda_t == 0.0 {
        let mut w = vec![0.0; k_max + 1];
        w[0] = 1.0;
        return w;
    }
    let ln_lt = lambda_t.ln();
    (0..=k_max)
        .map(|k| {
            let ln_w = -lambda_t + k as f64 * ln_lt - ln_gamma(k as f64 + 1.0);
            if ln_w < -745.0 {
                0.0
            } else {
                ln_w.exp()
            }
        })
        .collect()
}

/// Killed heat kernel on an explicit domain: the distribution of the walk
/// started at `x` and absorbed outside `domain`, observed at time `t`.
/// Returns probabilities aligned with `domain` (zero where unreachable),
/// the absorbed mass, the truncation tail, `lambda`, and the series length.
pub fn killed_profile<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    domain: &[Site],
    x: Site,
    t: f64,
    tail_tolerance: f64,
) -> Result<(Vec<f64>, f64, f64, f64, usize), HeatKernelError> {
    if !(t >= 0.0) {
        return Err(HeatKernelError::BadTime(t));
    }
    let gen = Generator::assemble(env, speed, domain)?;
    let xi = gen
        .index_of(x)
        .ok_or(HeatKernelError::SourceOffDomain(x))?;
    let lambda = gen
        .rate_total
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);

    let n = domain.len();
    if lambda == 0.0 || t == 0.0 {
        // no jumps can occur: the walk sits at x
        let mut p = vec![0.0; n];
        p[xi] = 1.0;
        return Ok((p, 0.0, 0.0, lambda, 1));
    }

    let k_max = poisson_length(lambda * t, tail_tolerance);
    let w = poisson_weights(lambda * t, k_max);
    let covered: f64 = w.iter().sum();
    let tail = (1.0 - covered).max(0.0);
    debug_assert!(tail <= 2.0 * tail_tolerance, "poisson tail {tail} too fat");

    let mut v = vec![0.0; n];
    v[xi] = 1.0;
    let mut next = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut absorbed = 0.0;
    let mut leak = 0.0;
    for k in 0..=k_max {
        let wk = w[k];
        if wk > 0.0 {
            for i in 0..n {
                acc[i] += wk * v[i];
            }
            leak += wk * absorbed;
        }
        if k < k_max {
            absorbed += gen.uniformized_step(lambda, &v, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
    }
    Ok((acc, leak, tail, lambda, k_max + 1))
}

/// Distribution of the walk at time `t`, on a patch sized automatically so
/// the Dirichlet leak stays below budget. The patch is the open component
/// of `x` inside a lattice ball whose radius starts at the diffusive scale
/// and grows on demand; running out of window is an error that names the
/// half-width to resample with.
pub fn transition_profile<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    x: Site,
    t: f64,
    opts: &HeatKernelOptions,
) -> Result<HeatProfile, HeatKernelError> {
    transition_profile_reaching(env, speed, x, t, 0, opts)
}

/// Same as [`transition_profile`] but guarantees the initial patch covers
/// l1 distance `reach` around the source (used when far-off targets must
/// lie on the patch even if the diffusive scale is small).
pub fn transition_profile_reaching<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    x: Site,
    t: f64,
    reach: i32,
    opts: &HeatKernelOptions,
) -> Result<HeatProfile, HeatKernelError> {
    if !(t >= 0.0) {
        return Err(HeatKernelError::BadTime(t));
    }
    let hw = env.half_width();
    let cap = opts.max_radius.unwrap_or(hw).min(hw);

    // pilot lambda from a small patch around the source; refreshed on the
    // actual patch every attempt
    let mut radius = initial_radius(env, speed, x, t, reach)?;
    let mut attempt = 0;
    loop {
        let r = radius.min(cap);
        let domain = component_in_ball(env, x, r)?;
        if domain.is_empty() {
            return Err(HeatKernelError::SourceOffDomain(x));
        }
        let (prob, leak, tail, lambda, terms) =
            killed_profile(env, speed, &domain, x, t, opts.tail_tolerance)?;
        if leak <= opts.leak_budget || attempt >= 6 {
            if leak > opts.leak_budget {
                return Err(HeatKernelError::WindowTooSmall {
                    required_radius: radius,
                    half_width: hw,
                });
            }
            let theta: Result<Vec<f64>, EnvironmentError> =
                domain.iter().map(|&s| env.theta(s, speed)).collect();
            let index = domain
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, i as u32))
                .collect();
            return Ok(HeatProfile {
                sites: domain,
                index,
                probability: prob,
                theta: theta?,
                t,
                source: x,
                lambda,
                leak,
                tail,
                poisson_terms: terms,
                radius: r,
            });
        }
        if r >= cap {
            return Err(HeatKernelError::WindowTooSmall {
                required_radius: radius.max(r + 1),
                half_width: hw,
            });
        }
        radius = (radius as f64 * 1.5).ceil() as i32;
        attempt += 1;
    }
}

fn initial_radius<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    x: Site,
    t: f64,
    reach: i32,
) -> Result<i32, HeatKernelError> {
    let pilot = component_in_ball(env, x, 4.min(env.half_width()))?;
    let mut lambda = 0.0f64;
    for &s in &pilot {
        let th = env.theta(s, speed)?;
        if th > 0.0 {
            lambda = lambda.max(env.mu(s)? / th);
        }
    }
    let diffusive = 6.5 * (lambda * t).sqrt();
    Ok((diffusive.ceil() as i32 + reach + 2).max(8))
}

/// Kernel at a single space-time point, on an automatically sized patch.
pub fn transition_density<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    x: Site,
    y: Site,
    t: f64,
    opts: &HeatKernelOptions,
) -> Result<HeatKernelPoint, HeatKernelError> {
    let reach = x.l1(y) as i32;
    let prof = transition_profile_reaching(env, speed, x, t, reach, opts)?;
    Ok(HeatKernelPoint {
        t,
        x,
        y,
        density: prof.density(y),
        probability: prof.probability(y),
        leak: prof.leak,
        tail: prof.tail,
        lambda: prof.lambda,
        poisson_terms: prof.poisson_terms,
        radius: prof.radius,
    })
}

/// Local-limit curve: `t * p_t(source, target(t))` along the given times,
/// where `target(t)` tracks the diffusively scaled point `u sqrt(t)`. With
/// cluster geometry the target snaps to the nearest point of the infinite
/// (spanning) cluster; otherwise it is rounded coordinatewise. One
/// evolution sized for the largest time serves every entry.
pub fn llt_curve<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    source: Site,
    u: [f64; 2],
    times: &[f64],
    geometry: Option<&ClusterGeometry>,
    opts: &HeatKernelOptions,
) -> Result<Vec<LltPoint>, HeatKernelError> {
    if times.is_empty() {
        return Err(HeatKernelError::EmptyTimes);
    }
    let mut t_max = 0.0f64;
    for &t in times {
        if !(t >= 0.0) {
            return Err(HeatKernelError::BadTime(t));
        }
        t_max = t_max.max(t);
    }

    // resolve targets first so the patch can be sized to reach them
    let mut targets = Vec::with_capacity(times.len());
    let mut reach = 0i32;
    for &t in times {
        let req = [u[0] * t.sqrt(), u[1] * t.sqrt()];
        let target = match geometry {
            Some(geom) => geom.nearest_cluster_point(req, 0.0)?,
            None => Site {
                x: req[0].round() as i32,
                y: req[1].round() as i32,
            },
        };
        reach = reach.max(source.l1(target) as i32);
        targets.push((t, req, target));
    }

    // one patch and one evolution serve every time: per-time Poisson
    // mixtures are accumulated during a single pass of the chain, and the
    // patch regrows only if the worst per-time leak misses the budget
    let hw = env.half_width();
    let cap = opts.max_radius.unwrap_or(hw).min(hw);
    let mut radius = initial_radius(env, speed, source, t_max, reach)?;
    let mut attempt = 0;
    loop {
        let r = radius.min(cap);
        let domain = component_in_ball(env, source, r)?;
        let gen = Generator::assemble(env, speed, &domain)?;
        let lambda = gen.rate_total.iter().cloned().fold(0.0f64, f64::max);
        let xi = gen
            .index_of(source)
            .ok_or(HeatKernelError::SourceOffDomain(source))?;
        let n = domain.len();

        if lambda == 0.0 {
            // isolated source: the walk never moves
            let mut out = Vec::with_capacity(targets.len());
            for &(t, req, target) in &targets {
                let th = env.theta(target, speed)?;
                out.push(LltPoint {
                    t,
                    target,
                    requested: req,
                    scaled_density: if target == source { t / th } else { 0.0 },
                    leak: 0.0,
                });
            }
            return Ok(out);
        }

        let k_max = poisson_length(lambda * t_max, opts.tail_tolerance);
        let weights: Vec<Vec<f64>> = targets
            .iter()
            .map(|&(t, _, _)| poisson_weights(lambda * t, k_max))
            .collect();
        let target_idx: Vec<Option<usize>> = targets
            .iter()
            .map(|&(_, _, s)| gen.index_of(s))
            .collect();

        let mut v = vec![0.0; n];
        v[xi] = 1.0;
        let mut next = vec![0.0; n];
        let mut absorbed = 0.0;
        let mut acc = vec![0.0f64; targets.len()];
        let mut leaks = vec![0.0f64; targets.len()];
        for k in 0..=k_max {
            for (ti, w) in weights.iter().enumerate() {
                let wk = w[k];
                if wk > 0.0 {
                    if let Some(j) = target_idx[ti] {
                        acc[ti] += wk * v[j];
                    }
                    leaks[ti] += wk * absorbed;
                }
            }
            if k < k_max {
                absorbed += gen.uniformized_step(lambda, &v, &mut next);
                std::mem::swap(&mut v, &mut next);
            }
        }

        let worst = leaks.iter().cloned().fold(0.0f64, f64::max);
        if worst <= opts.leak_budget {
            let mut out = Vec::with_capacity(targets.len());
            for (ti, &(t, req, target)) in targets.iter().enumerate() {
                let th = env.theta(target, speed)?;
                if !(th > 0.0) {
                    return Err(HeatKernelError::Operator(OperatorError::IsolatedSite(
                        target,
                    )));
                }
                out.push(LltPoint {
                    t,
                    target,
                    requested: req,
                    scaled_density: t * acc[ti] / th,
                    leak: leaks[ti],
                });
            }
            return Ok(out);
        }
        if r >= cap || attempt >= 6 {
            return Err(HeatKernelError::WindowTooSmall {
                required_radius: radius.max(r + 1),
                half_width: hw,
            });
        }
        radius = (radius as f64 * 1.5).ceil() as i32;
        attempt += 1;
    }
}

/// Sup-distance of the scaled kernel from the centered Gaussian with
/// per-coordinate variance `sigma_sq`, over targets within Euclidean
/// distance `horizon * sqrt(t)` of the source.
pub fn gaussian_diagnostic<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    source: Site,
    t: f64,
    sigma_sq: f64,
    horizon: f64,
    opts: &HeatKernelOptions,
) -> Result<GaussianDiagnostic, HeatKernelError> {
    if !(t > 0.0) {
        return Err(HeatKernelError::BadTime(t));
    }
    if !(sigma_sq > 0.0) || !(horizon > 0.0) {
        return Err(HeatKernelError::BadParameter);
    }
    let prof = transition_profile(env, speed, source, t, opts)?;
    let r2 = horizon * horizon * t;
    let mut sup = 0.0;
    let mut argmax = source;
    let mut count = 0usize;
    for &z in prof.sites() {
        let d = z - source;
        let dd = (d.x as f64).powi(2) + (d.y as f64).powi(2);
        if dd > r2 {
            continue;
        }
        count += 1;
        let gauss = (-dd / (2.0 * sigma_sq * t)).exp() / (2.0 * std::f64::consts::PI * sigma_sq);
        let dev = (t * prof.density(z) - gauss).abs();
        if dev > sup {
            sup = dev;
            argmax = z;
        }
    }
    Ok(GaussianDiagnostic {
        t,
        sigma_sq,
        sup_deviation: sup,
        argmax,
        num_targets: count,
        leak: prof.leak,
    })
}

#[derive(thiserror::Error, Debug)]
pub enum HeatKernelError {
    #[error("time {0} is not a finite nonnegative number")]
    BadTime(f64),
    #[error("bad diagnostic parameter (variance and horizon must be positive)")]
    BadParameter,
    #[error("no times supplied")]
    EmptyTimes,
    #[error("source {0} is not on the requested patch")]
    SourceOffDomain(Site),
    #[error(
        "window half-width {half_width} cannot hold the radius-{required_radius} patch needed \
         to meet the leak budget; sample a larger window"
    )]
    WindowTooSmall { required_radius: i32, half_width: i32 },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Percolation(#[from] PercolationError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{ConductanceLaw, PositiveLaw, StaticEnvironment};
    use crate::lattice::{site, Window};
    use approx::assert_relative_eq;

    fn homogeneous(hw: i32) -> StaticEnvironment {
        StaticEnvironment::sample(ConductanceLaw::homogeneous(), Window::new(hw), 0)
    }

    fn random_env(hw: i32, seed: u64) -> StaticEnvironment {
        let law = ConductanceLaw::new(0.8, PositiveLaw::Uniform { lo: 0.5, hi: 2.0 }).unwrap();
        StaticEnvironment::sample(law, Window::new(hw), seed)
    }

    /// Modified Bessel function of integer order by its power series,
    /// evaluated in log space. Good for the moderate arguments used here.
    fn bessel_i(n: u32, z: f64) -> f64 {
        let mut total = 0.0f64;
        for m in 0..200 {
            let ln_term = (n as f64 + 2.0 * m as f64) * (z / 2.0).ln()
                - ln_gamma(m as f64 + 1.0)
                - ln_gamma((n + m) as f64 + 1.0);
            total += ln_term.exp();
        }
        total
    }

    /// Free-lattice kernel of the unit-conductance variable-speed walk:
    /// the two coordinates jump independently, each a continuous-time
    /// +/-1 walk at rate 2, giving a product of Bessel factors.
    fn free_kernel(t: f64, dx: u32, dy: u32) -> f64 {
        (-4.0 * t).exp() * bessel_i(dx, 2.0 * t) * bessel_i(dy, 2.0 * t)
    }

    #[test]
    fn zero_time_is_a_point_mass() {
        let env = homogeneous(12);
        let prof = transition_profile(
            &env,
            SpeedMeasure::Csrw,
            Site::ORIGIN,
            0.0,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        assert_eq!(prof.probability(Site::ORIGIN), 1.0);
        assert_relative_eq!(prof.density(Site::ORIGIN), 0.25, max_relative = 1e-12);
        assert_eq!(prof.leak, 0.0);
    }

    #[test]
    fn homogeneous_kernel_matches_the_bessel_product() {
        let env = homogeneous(64);
        let t = 2.0;
        let prof = transition_profile(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            t,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        for (dx, dy) in [(0, 0), (1, 0), (2, 1), (3, 3), (5, 0)] {
            let got = prof.density(site(dx, dy));
            let want = free_kernel(t, dx as u32, dy as u32);
            assert_relative_eq!(got, want, max_relative = 1e-8, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_speed_walk_is_the_variable_one_run_four_times_slower() {
        // with unit conductances mu = 4 everywhere, so the time-changed
        // walk matches and the density picks up the 1/theta = 1/4
        let env = homogeneous(64);
        let t = 4.0;
        let p_c = transition_profile(
            &env,
            SpeedMeasure::Csrw,
            Site::ORIGIN,
            t,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        let p_v = transition_profile(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            t / 4.0,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        for s in [Site::ORIGIN, site(1, 0), site(2, -1), site(0, 3)] {
            assert_relative_eq!(
                p_c.density(s),
                p_v.density(s) / 4.0,
                max_relative = 1e-9,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn mass_leak_and_tail_account_for_everything() {
        let env = random_env(48, 3);
        let prof = transition_profile(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            6.0,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        let total = prof.mass() + prof.leak;
        assert!((1.0 - total) <= 5.0 * prof.tail + 1e-12, "mass defect {}", 1.0 - total);
        assert!(prof.leak <= DEFAULT_LEAK_BUDGET);
    }

    #[test]
    fn kernel_is_symmetric_in_random_environments() {
        let env = random_env(48, 11);
        let t = 5.0;
        let x = Site::ORIGIN;
        let y = site(3, -2);
        let from_x = transition_profile(&env, SpeedMeasure::Csrw, x, t, &HeatKernelOptions::default())
            .unwrap();
        let from_y = transition_profile(&env, SpeedMeasure::Csrw, y, t, &HeatKernelOptions::default())
            .unwrap();
        let peak = from_x.density(x);
        assert!(
            (from_x.density(y) - from_y.density(x)).abs() <= 1e-10 * peak,
            "{} vs {}",
            from_x.density(y),
            from_y.density(x)
        );
    }

    /// Dense matrix exponential by scaling and squaring of the Taylor
    /// series; the oracle for killed kernels on small domains.
    fn dense_expm_row(
        env: &StaticEnvironment,
        speed: SpeedMeasure,
        domain: &[Site],
        x: Site,
        t: f64,
    ) -> Vec<f64> {
        use crate::lattice::neighbors;
        use crate::lattice::Edge;
        let n = domain.len();
        let idx: std::collections::HashMap<Site, usize> =
            domain.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut a = vec![vec![0.0f64; n]; n];
        for (i, &s) in domain.iter().enumerate() {
            let th = env.theta(s, speed).unwrap();
            for nb in neighbors(s) {
                let w = env.conductance(Edge::between(s, nb)).unwrap();
                if w <= 0.0 {
                    continue;
                }
                a[i][i] -= w / th;
                if let Some(&j) = idx.get(&nb) {
                    a[i][j] += w / th;
                }
            }
        }
        // scale
        let norm: f64 = a
            .iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            * t;
        let s = (norm / 0.5).log2().ceil().max(0.0) as u32;
        let scale = t / 2f64.powi(s as i32);
        // series for e^{A scale}
        let mut result = vec![vec![0.0f64; n]; n];
        let mut term = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            result[i][i] = 1.0;
            term[i][i] = 1.0;
        }
        for k in 1..60 {
            let mut nt = vec![vec![0.0f64; n]; n];
            for i in 0..n {
                for l in 0..n {
                    if term[i][l] == 0.0 {
                        continue;
                    }
                    let f = term[i][l] * scale / k as f64;
                    for j in 0..n {
                        nt[i][j] += f * a[l][j];
                    }
                }
            }
            term = nt;
            let mut biggest = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    result[i][j] += term[i][j];
                    biggest = biggest.max(term[i][j].abs());
                }
            }
            if biggest < 1e-18 {
                break;
            }
        }
        // square s times
        for _ in 0..s {
            let mut sq = vec![vec![0.0f64; n]; n];
            for i in 0..n {
                for l in 0..n {
                    if result[i][l] == 0.0 {
                        continue;
                    }
                    let f = result[i][l];
                    for j in 0..n {
                        sq[i][j] += f * result[l][j];
                    }
                }
            }
            result = sq;
        }
        result[idx[&x]].clone()
    }

    #[test]
    fn killed_kernel_matches_dense_matrix_exponential() {
        use crate::percolation::component_in_ball;
        for seed in [2u64, 9, 17] {
            let env = random_env(6, seed);
            let comp = component_in_ball(&env, Site::ORIGIN, 3).unwrap();
            if comp.len() < 3 {
                continue;
            }
            for speed in [SpeedMeasure::Vsrw, SpeedMeasure::Csrw] {
                let t = 0.7;
                let (probs, leak, _, _, _) =
                    killed_profile(&env, speed, &comp, Site::ORIGIN, t, 1e-12).unwrap();
                let dense = dense_expm_row(&env, speed, &comp, Site::ORIGIN, t);
                for (i, &p) in probs.iter().enumerate() {
                    assert_relative_eq!(p, dense[i], epsilon = 1e-11, max_relative = 1e-8);
                }
                assert!(leak > 0.0, "a radius-3 patch must leak by t = 0.7");
            }
        }
    }

    #[test]
    fn scaled_on_diagonal_kernel_approaches_its_limit() {
        // for unit conductances t p_t(0,0) -> 1/(4 pi)
        let env = homogeneous(266);
        let pts = llt_curve(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            [0.0, 0.0],
            &[100.0, 400.0],
            None,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        let limit = 1.0 / (4.0 * std::f64::consts::PI);
        let d100 = (pts[0].scaled_density - limit).abs() / limit;
        let d400 = (pts[1].scaled_density - limit).abs() / limit;
        assert!(d400 < 2e-3, "relative gap {d400} at t = 400");
        assert!(d400 < d100, "gap should shrink with t: {d100} -> {d400}");
    }

    #[test]
    fn llt_tracks_offdiagonal_targets() {
        let env = homogeneous(200);
        let u = [0.75, -0.5];
        let pts = llt_curve(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            u,
            &[144.0],
            None,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        assert_eq!(pts[0].target, site(9, -6));
        // limit is the sigma^2 = 2 Gaussian at u
        let limit = (-(u[0] * u[0] + u[1] * u[1]) / 4.0).exp() / (4.0 * std::f64::consts::PI);
        assert_relative_eq!(pts[0].scaled_density, limit, max_relative = 2e-2);
    }

    #[test]
    fn gaussian_diagnostic_shrinks_with_time() {
        let env = homogeneous(200);
        let d25 = gaussian_diagnostic(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            25.0,
            2.0,
            3.0,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        let d100 = gaussian_diagnostic(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            100.0,
            2.0,
            3.0,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        assert!(d100.sup_deviation < d25.sup_deviation);
        assert!(d100.sup_deviation < 5e-4, "sup dev {}", d100.sup_deviation);
        assert!(d100.num_targets > 1000);
    }

    #[test]
    fn window_too_small_is_reported_with_the_needed_radius() {
        let env = homogeneous(10);
        let err = transition_profile(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            50.0,
            &HeatKernelOptions::default(),
        );
        match err {
            Err(HeatKernelError::WindowTooSmall { required_radius, half_width }) => {
                assert_eq!(half_width, 10);
                assert!(required_radius > 10);
            }
            other => panic!("expected WindowTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn off_patch_reads_are_zero() {
        let env = homogeneous(40);
        let prof = transition_profile(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            1.0,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        assert_eq!(prof.density(site(39, 39)), 0.0);
    }

    #[test]
    fn percolation_kernel_stays_on_the_cluster_and_sums_to_one() {
        let env = random_env(48, 21);
        let prof = transition_profile(
            &env,
            SpeedMeasure::Vsrw,
            Site::ORIGIN,
            4.0,
            &HeatKernelOptions::default(),
        )
        .unwrap();
        assert!(prof.mass() + prof.leak > 1.0 - 1e-9);
        // all probed sites connect to the source by construction
        assert!(prof.sites().contains(&Site::ORIGIN));
    }
}
