//! Environment-averaged kernels of the dynamic walk.
//!
//! The quenched transition density of one realized dynamic environment is
//! computed exactly (up to certified truncations) by per-frame
//! uniformization: within a frame the generator is constant, so the
//! distribution advances through a Poisson mixture of powers of the
//! substochastic step `P = I + L / lambda`, with the dominating rate
//! `lambda = 4 c_hi` shared by every frame. Averaging the quenched values
//! over independent environment realizations gives the annealed density
//! `pbar_t(0, y)` with a Monte Carlo standard error over environments.
//!
//! The domain is a fixed l1 ball sized so that the mass absorbed at its
//! boundary over the whole horizon stays below roughly `1e-7`; the exact
//! absorbed mass is returned with every estimate as a certificate.
//!
//! The annealed potential kernel integrates `pbar_t(0,0) - pbar_t(0,x)` in
//! time per environment (Simpson on a uniform grid early, Simpson in
//! `ln t` late) and reports the shape of the truncated tail: past the
//! cutoff the integrand decays like `t^{-3/2}`, so the omitted mass is
//! close to `2 T f(T)` — the exact value of that extrapolation at the
//! cutoff is the `tail_indicator`.

use super::{DynamicEnvironment, DynamicError, DynamicKind, DynamicLaw};
use crate::environment::ConductanceField;
use crate::heatkernel::poisson_weights;
use crate::lattice::{ball, neighbors, Edge, Site};
use crate::rng::Stream;
use serde::Serialize;
use std::collections::HashMap;

/// Sizing constant: the patch radius is `z sqrt(lambda t)` plus the target
/// reach, putting the absorbed mass near `8 Phi-bar(z) ~ 1e-7`.
pub const ANNEALED_LEAK_Z: f64 = 5.2;

/// An annealed (environment-averaged) kernel value.
#[derive(Clone, Debug, Serialize)]
pub struct AnnealedKernelEstimate {
    pub value: f64,
    /// Standard error over environment realizations.
    pub std_error: f64,
    pub num_envs: usize,
    /// Worst absorbed-mass certificate among the realizations.
    pub leak: f64,
    /// For time integrals: size of the modelled `t^{-3/2}` tail beyond the
    /// cutoff, `2 T |f(T)|`.
    pub tail_indicator: Option<f64>,
}

/// Patch radius needed to evolve to `t_max` while reaching targets at l1
/// distance `reach`.
fn patch_radius(dlaw: &DynamicLaw, t_max: f64, reach: i64) -> i32 {
    let lambda = 4.0 * dlaw.bounds().c_hi;
    ((ANNEALED_LEAK_Z * (lambda * t_max).sqrt()).ceil() as i32 + reach as i32 + 2).max(6)
}

/// Smallest window half-width that supports an annealed computation to
/// horizon `t_max` with targets at l1 distance `reach` from the origin.
pub fn required_half_width(dlaw: &DynamicLaw, t_max: f64, reach: i64) -> i32 {
    patch_radius(dlaw, t_max, reach) + 1
}

/// Poisson series length with truncated tail below `tol` (Chernoff bound).
fn series_length(lambda_t: f64, tol: f64) -> usize {
    let l = (1.0 / tol).ln();
    (lambda_t + l / 3.0 + (l * l / 9.0 + 2.0 * l * lambda_t).sqrt()).ceil() as usize + 1
}

/// Fixed-domain stepper for one frame at a time: CSR-free adjacency on an
/// l1 ball, rates refilled per frame, jumps leaving the ball absorbed.
struct Patch {
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
    nbr: Vec<[i32; 4]>,
    edge: Vec<[Edge; 4]>,
    rate: Vec<[f64; 4]>,
    lambda: f64,
}

impl Patch {
    fn build(radius: i32, lambda: f64) -> Patch {
        let sites = ball(Site::ORIGIN, radius);
        let index: HashMap<Site, usize> =
            sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut nbr = Vec::with_capacity(sites.len());
        let mut edge = Vec::with_capacity(sites.len());
        for &s in &sites {
            let ns = neighbors(s);
            let mut row = [-1i32; 4];
            let mut erow = [Edge::between(s, ns[0]); 4];
            for (d, &nb) in ns.iter().enumerate() {
                row[d] = index.get(&nb).map(|&i| i as i32).unwrap_or(-1);
                erow[d] = Edge::between(s, nb);
            }
            nbr.push(row);
            edge.push(erow);
        }
        let rate = vec![[0.0; 4]; sites.len()];
        Patch { sites, index, nbr, edge, rate, lambda }
    }

    fn index_of(&self, s: Site) -> Option<usize> {
        self.index.get(&s).copied()
    }

    fn load_frame<C: ConductanceField>(&mut self, frame: &C) -> Result<(), DynamicError> {
        for i in 0..self.sites.len() {
            for d in 0..4 {
                self.rate[i][d] = frame.conductance(self.edge[i][d])? / self.lambda;
            }
        }
        Ok(())
    }

    /// `out = v P` for the current frame's substochastic step.
    fn step(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..v.len() {
            let r = &self.rate[i];
            let nb = &self.nbr[i];
            let total = r[0] + r[1] + r[2] + r[3];
            let mut acc = v[i] * (1.0 - total);
            for d in 0..4 {
                if nb[d] >= 0 {
                    acc += r[d] * v[nb[d] as usize];
                }
            }
            out[i] = acc;
        }
    }
}

/// Quenched evolution of one realization, recording the target densities
/// at each requested time.
struct Recording {
    /// `values[m][j]` = density at `times[m]`, target `j`.
    values: Vec<Vec<f64>>,
    /// Mass absorbed at the patch boundary by the final horizon (plus the
    /// negligible series-truncation deficit).
    leak: f64,
}

fn evolve_recording(
    denv: &mut DynamicEnvironment,
    times: &[f64],
    targets: &[Site],
    radius: i32,
) -> Result<Recording, DynamicError> {
    let dt = denv.frame_dt();
    let lambda = 4.0 * denv.bounds().c_hi;
    let mut patch = Patch::build(radius, lambda);
    let target_idx: Vec<usize> = targets
        .iter()
        .map(|&s| patch.index_of(s).expect("targets lie inside the patch"))
        .collect();
    let source = patch.index_of(Site::ORIGIN).expect("origin is in the patch");

    let n = patch.sites.len();
    let mut v = vec![0.0f64; n];
    v[source] = 1.0;
    let mut acc = vec![0.0f64; n];
    let mut tmp = vec![0.0f64; n];

    let mut values = vec![Vec::new(); times.len()];
    let mut cursor = 0.0f64;
    let mut m = 0usize;
    // serve any t = 0 recordings from the initial condition
    while m < times.len() && times[m] <= 0.0 {
        values[m] = target_idx.iter().map(|&j| v[j]).collect();
        m += 1;
    }

    let horizon = *times.last().expect("at least one time");
    let mut slot = 0usize;
    while cursor < horizon - 1e-12 {
        let frame_end = ((slot + 1) as f64 * dt).min(horizon);
        patch.load_frame(denv.frame(slot)?)?;
        // split the frame at every recording time inside it
        let mut seg_start = cursor;
        loop {
            let seg_end = if m < times.len() && times[m] <= frame_end + 1e-12 {
                times[m].min(frame_end)
            } else {
                frame_end
            };
            let lam_t = lambda * (seg_end - seg_start);
            if lam_t > 0.0 {
                let len = series_length(lam_t, 1e-12);
                let w = poisson_weights(lam_t, len);
                for a in acc.iter_mut() {
                    *a = 0.0;
                }
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += w[0] * v[i];
                }
                for wk in w.iter().skip(1) {
                    patch.step(&v, &mut tmp);
                    std::mem::swap(&mut v, &mut tmp);
                    if *wk > 0.0 {
                        for (a, vi) in acc.iter_mut().zip(v.iter()) {
                            *a += wk * vi;
                        }
                    }
                }
                std::mem::swap(&mut v, &mut acc);
            }
            while m < times.len() && times[m] <= seg_end + 1e-12 {
                values[m] = target_idx.iter().map(|&j| v[j]).collect();
                m += 1;
            }
            seg_start = seg_end;
            if seg_end >= frame_end - 1e-12 {
                break;
            }
        }
        cursor = frame_end;
        slot += 1;
    }

    let mass: f64 = v.iter().sum();
    Ok(Recording { values, leak: (1.0 - mass).max(0.0) })
}

fn env_seed(seed: u64, e: usize) -> u64 {
    Stream::keyed(seed, &[0xA44E, e as u64]).next_u64()
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Annealed transition density `pbar_t(0, y)`: the quenched density of the
/// walk started at the origin, averaged over `m_env` fresh realizations of
/// the dynamic law. Site weights are one, so density equals probability.
pub fn annealed_density(
    dlaw: &DynamicLaw,
    t: f64,
    y: Site,
    m_env: usize,
    seed: u64,
) -> Result<AnnealedKernelEstimate, DynamicError> {
    if !(t > 0.0) {
        return Err(DynamicError::BadTime(t));
    }
    if m_env == 0 {
        return Err(DynamicError::TooFewSamples { needed: 1, got: 0 });
    }
    let reach = y.l1(Site::ORIGIN);
    let radius = patch_radius(dlaw, t, reach);
    let hw = dlaw.window.half_width();
    if hw < radius + 1 {
        return Err(DynamicError::WindowTooSmall {
            required: radius + 1,
            half_width: hw,
            horizon: t,
        });
    }
    let mut samples = Vec::with_capacity(m_env);
    let mut leak = 0.0f64;
    for e in 0..m_env {
        let mut denv = dlaw.realize(env_seed(seed, e))?;
        let rec = evolve_recording(&mut denv, &[t], &[y], radius)?;
        samples.push(rec.values[0][0]);
        leak = leak.max(rec.leak);
    }
    let (value, std_error) = mean_and_se(&samples);
    Ok(AnnealedKernelEstimate { value, std_error, num_envs: m_env, leak, tail_indicator: None })
}

/// One point of the annealed gradient diagnostic.
#[derive(Clone, Debug, Serialize)]
pub struct GradientPoint {
    pub t: f64,
    /// Largest annealed density difference over any nearest-neighbour pair.
    pub gradient: f64,
    pub std_error: f64,
    /// The pair attaining the maximum.
    pub edge: (Site, Site),
}

/// Maximal nearest-neighbour difference of the annealed heat kernel at each
/// requested time, from one evolution per environment recording the whole
/// patch. The extremal pair sits at distance of order sqrt(t) from the
/// origin — right next to the source the difference loses a full extra
/// power of t to symmetry — so the maximum must scan every adjacent pair of
/// patch sites, not just the central ones. Quenched fields are averaged
/// over the eight lattice symmetries whenever the law is invariant under
/// them (every kind except the tilted interface), which costs nothing and
/// cuts the environment variance. The reported error is the quadrature sum
/// of the two endpoint standard errors at the extremal pair; the endpoints
/// are positively correlated across environments, so this leans
/// conservative.
pub fn annealed_gradient_curve(
    dlaw: &DynamicLaw,
    times: &[f64],
    m_env: usize,
    seed: u64,
) -> Result<Vec<GradientPoint>, DynamicError> {
    if times.is_empty() || times.iter().any(|&t| !(t > 0.0)) {
        return Err(DynamicError::BadTime(times.first().copied().unwrap_or(0.0)));
    }
    if m_env < 2 {
        return Err(DynamicError::TooFewSamples { needed: 2, got: m_env });
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t_max = *sorted.last().unwrap();
    let radius = patch_radius(dlaw, t_max, 0);
    let hw = dlaw.window.half_width();
    if hw < radius + 1 {
        return Err(DynamicError::WindowTooSmall {
            required: radius + 1,
            half_width: hw,
            horizon: t_max,
        });
    }

    let sites = ball(Site::ORIGIN, radius);
    let n = sites.len();
    let pos: HashMap<Site, usize> = sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();

    // orbit bookkeeping for the eight lattice symmetries: a site's class is
    // the sorted pair of coordinate magnitudes
    let symmetric = !matches!(dlaw.kind, DynamicKind::Interface { .. });
    let mut orbit_of = vec![0u32; n];
    let mut orbit_count: Vec<f64> = Vec::new();
    if symmetric {
        let mut classes: HashMap<(i32, i32), u32> = HashMap::new();
        for (i, s) in sites.iter().enumerate() {
            let (ax, ay) = (s.x.abs(), s.y.abs());
            let next = classes.len() as u32;
            let id = *classes.entry((ax.max(ay), ax.min(ay))).or_insert(next);
            if id as usize == orbit_count.len() {
                orbit_count.push(0.0);
            }
            orbit_of[i] = id;
            orbit_count[id as usize] += 1.0;
        }
    }

    let mut sum = vec![vec![0.0f64; n]; sorted.len()];
    let mut sumsq = vec![vec![0.0f64; n]; sorted.len()];
    let mut orbit_acc = vec![0.0f64; orbit_count.len()];
    for e in 0..m_env {
        let mut denv = dlaw.realize(env_seed(seed, e))?;
        let rec = evolve_recording(&mut denv, &sorted, &sites, radius)?;
        for (mi, row) in rec.values.iter().enumerate() {
            if symmetric {
                for a in orbit_acc.iter_mut() {
                    *a = 0.0;
                }
                for (i, &v) in row.iter().enumerate() {
                    orbit_acc[orbit_of[i] as usize] += v;
                }
                for i in 0..n {
                    let o = orbit_of[i] as usize;
                    let v = orbit_acc[o] / orbit_count[o];
                    sum[mi][i] += v;
                    sumsq[mi][i] += v * v;
                }
            } else {
                for (i, &v) in row.iter().enumerate() {
                    sum[mi][i] += v;
                    sumsq[mi][i] += v * v;
                }
            }
        }
    }

    let m = m_env as f64;
    let mut out = Vec::with_capacity(sorted.len());
    for (mi, &t) in sorted.iter().enumerate() {
        let mean: Vec<f64> = sum[mi].iter().map(|s| s / m).collect();
        let se2: Vec<f64> = sumsq[mi]
            .iter()
            .zip(mean.iter())
            .map(|(&sq, &mu)| (sq / m - mu * mu).max(0.0) / (m - 1.0))
            .collect();
        let mut best = 0.0f64;
        let mut best_se = 0.0f64;
        let mut best_edge = (Site::ORIGIN, Site::ORIGIN);
        for (i, &s) in sites.iter().enumerate() {
            for nb in neighbors(s) {
                if (nb.x, nb.y) < (s.x, s.y) {
                    continue;
                }
                let Some(&j) = pos.get(&nb) else { continue };
                let g = (mean[i] - mean[j]).abs();
                if g > best {
                    best = g;
                    best_se = (se2[i] + se2[j]).sqrt();
                    best_edge = (s, nb);
                }
            }
        }
        out.push(GradientPoint { t, gradient: best, std_error: best_se, edge: best_edge });
    }
    Ok(out)
}

/// Annealed potential kernel `abar(0, x)`: the time integral of
/// `pbar_t(0,0) - pbar_t(0,x)` up to `t_cut`, one quadrature per
/// environment, plus the modelled tail beyond the cutoff.
pub fn annealed_potential(
    dlaw: &DynamicLaw,
    x: Site,
    t_cut: f64,
    m_env: usize,
    seed: u64,
) -> Result<AnnealedKernelEstimate, DynamicError> {
    if x == Site::ORIGIN {
        return Ok(AnnealedKernelEstimate {
            value: 0.0,
            std_error: 0.0,
            num_envs: m_env,
            leak: 0.0,
            tail_indicator: Some(0.0),
        });
    }
    if !(t_cut > 0.0 && t_cut.is_finite()) {
        return Err(DynamicError::BadQuadrature { t_cut });
    }
    if m_env == 0 {
        return Err(DynamicError::TooFewSamples { needed: 1, got: 0 });
    }

    // quadrature nodes: uniform Simpson over the sharp early decay, then
    // Simpson in ln t across the slow tail
    let t_switch = 4.0f64.min(t_cut);
    let uniform_cells = 24usize; // even
    let mut nodes: Vec<f64> = (0..=uniform_cells)
        .map(|i| t_switch * i as f64 / uniform_cells as f64)
        .collect();
    let log_cells = if t_cut > t_switch * (1.0 + 1e-9) {
        let mut c = ((t_cut / t_switch).ln() / 1.25f64.ln()).ceil() as usize;
        c += c % 2;
        c.max(2)
    } else {
        0
    };
    for i in 1..=log_cells {
        nodes.push(t_switch * (t_cut / t_switch).powf(i as f64 / log_cells as f64));
    }

    let reach = x.l1(Site::ORIGIN);
    let radius = patch_radius(dlaw, t_cut, reach);
    let hw = dlaw.window.half_width();
    if hw < radius + 1 {
        return Err(DynamicError::WindowTooSmall {
            required: radius + 1,
            half_width: hw,
            horizon: t_cut,
        });
    }

    let targets = [Site::ORIGIN, x];
    let mut integrals = Vec::with_capacity(m_env);
    let mut last_node_integrand = Vec::with_capacity(m_env);
    let mut leak = 0.0f64;
    for e in 0..m_env {
        let mut denv = dlaw.realize(env_seed(seed, e))?;
        let rec = evolve_recording(&mut denv, &nodes[1..], &targets, radius)?;
        // integrand at the nodes; t = 0 contributes exactly 1 - 0
        let mut f = Vec::with_capacity(nodes.len());
        f.push(1.0);
        for row in &rec.values {
            f.push(row[0] - row[1]);
        }
        // composite Simpson on the uniform segment
        let hu = t_switch / uniform_cells as f64;
        let mut integral = 0.0;
        for c in (0..uniform_cells).step_by(2) {
            integral += hu / 3.0 * (f[c] + 4.0 * f[c + 1] + f[c + 2]);
        }
        // composite Simpson in s = ln t on the geometric segment
        if log_cells > 0 {
            let hs = (t_cut / t_switch).ln() / log_cells as f64;
            let g =
                |i: usize| f[uniform_cells + i] * nodes[uniform_cells + i];
            for c in (0..log_cells).step_by(2) {
                integral += hs / 3.0 * (g(c) + 4.0 * g(c + 1) + g(c + 2));
            }
        }
        integrals.push(integral);
        last_node_integrand.push(*f.last().unwrap());
        leak = leak.max(rec.leak);
    }

    let (value, std_error) = mean_and_se(&integrals);
    let (f_end, _) = mean_and_se(&last_node_integrand);
    Ok(AnnealedKernelEstimate {
        value,
        std_error,
        num_envs: m_env,
        leak,
        tail_indicator: Some(2.0 * t_cut * f_end.abs()),
    })
}

/// Least-squares slope of `ln y` against `ln x` over points with positive
/// coordinates.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return f64::NAN;
    }
    let m = logs.len() as f64;
    let xbar = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let ybar = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - xbar).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    sxy / sxx
}
