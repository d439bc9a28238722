//! Gradient-interface dynamics on a torus and the conductances it induces.
//!
//! Heights `phi(x) = u . x + psi(x)` live on an `L x L` torus with a tilted
//! periodic boundary: the periodic part `psi` is stored, the affine tilt is
//! added to every gradient read. The heights evolve by the overdamped
//! Langevin equation
//!
//! ```text
//! d phi(x) = - sum_{y ~ x} V'(phi(x) - phi(y)) dt + sqrt(2) dW(x),
//! ```
//!
//! discretized with the Euler scheme (step `h`, stability `h <= 0.1/c_+`).
//! The potential is symmetric and strictly convex with curvature pinched in
//! `[c_-, c_+]`, so the induced edge conductances `w(x,y) = V''(grad)` are
//! uniformly elliptic frame by frame.
//!
//! For the quadratic potential the dynamics is linear and everything is
//! checkable against closed forms: the stationary field is the Gaussian
//! with mode variances `1/lambda_k` (torus Laplacian spectrum), sampled
//! here exactly in Fourier space for warm starts, and the Euler chain's own
//! stationary mode variance `1/(lambda (1 - h lambda / 2))` quantifies the
//! discretization bias that the step-halving extrapolation removes.

use super::DynamicError;
use crate::environment::{ConductanceLaw, PositiveLaw, StaticEnvironment};
use crate::lattice::{site, EdgeDir, Site, Window};
use crate::rng::Stream;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

/// Step sizes for the step-halving pair used by `variance_scaling`.
pub const RICHARDSON_STEPS: (f64, f64) = (0.04, 0.02);

/// Symmetric strictly convex interaction potentials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Potential {
    /// `V(r) = r^2 / 2`: curvature one, conductances identically one.
    Quadratic,
    /// `V(r) = r^2/2 + eps cos r`: curvature `1 - eps cos r` pinched in
    /// `[1 - eps, 1 + eps]`, requires `0 <= eps < 1`.
    AnharmonicCosine { epsilon: f64 },
}

impl Potential {
    pub fn validate(&self) -> Result<(), DynamicError> {
        match *self {
            Potential::Quadratic => Ok(()),
            Potential::AnharmonicCosine { epsilon } => {
                if (0.0..1.0).contains(&epsilon) {
                    Ok(())
                } else {
                    Err(DynamicError::BadEpsilon(epsilon))
                }
            }
        }
    }

    #[inline]
    pub fn v_prime(&self, r: f64) -> f64 {
        match *self {
            Potential::Quadratic => r,
            Potential::AnharmonicCosine { epsilon } => r - epsilon * r.sin(),
        }
    }

    #[inline]
    pub fn v_second(&self, r: f64) -> f64 {
        match *self {
            Potential::Quadratic => 1.0,
            Potential::AnharmonicCosine { epsilon } => 1.0 - epsilon * r.cos(),
        }
    }

    /// `(c_-, c_+)` with `c_- <= V'' <= c_+` everywhere.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        match *self {
            Potential::Quadratic => (1.0, 1.0),
            Potential::AnharmonicCosine { epsilon } => (1.0 - epsilon, 1.0 + epsilon),
        }
    }
}

/// Height field on the torus: periodic part plus tilt, with its own
/// Langevin clock and noise stream.
#[derive(Clone, Debug)]
pub struct InterfaceField {
    side: usize,
    psi: Vec<f64>,
    potential: Potential,
    tilt: [f64; 2],
    h: f64,
    seed: u64,
    step_count: u64,
    scratch: Vec<f64>,
}

impl InterfaceField {
    /// Flat start: heights exactly on the tilt plane.
    pub fn new(
        side: usize,
        potential: Potential,
        tilt: [f64; 2],
        h: f64,
        seed: u64,
    ) -> Result<InterfaceField, DynamicError> {
        potential.validate()?;
        if side < 4 {
            return Err(DynamicError::BadTorus(side));
        }
        let (_, c_plus) = potential.curvature_bounds();
        let bound = 0.1 / c_plus;
        if !(h > 0.0 && h <= bound * (1.0 + 1e-12)) {
            return Err(DynamicError::BadStep { step: h, bound });
        }
        Ok(InterfaceField {
            side,
            psi: vec![0.0; side * side],
            potential,
            tilt,
            h,
            seed,
            step_count: 0,
            scratch: vec![0.0; side * side],
        })
    }

    /// Warm start from the exact stationary Gaussian of the quadratic
    /// dynamics, sampled in Fourier space (zero total mean). For the
    /// quadratic potential this *is* the stationary law of the continuous
    /// dynamics; for anharmonic potentials it is a nearby starting point
    /// that still needs a burn-in.
    pub fn new_equilibrated(
        side: usize,
        potential: Potential,
        tilt: [f64; 2],
        h: f64,
        seed: u64,
    ) -> Result<InterfaceField, DynamicError> {
        let mut field = InterfaceField::new(side, potential, tilt, h, seed)?;
        field.psi = gaussian_free_field(side, seed);
        Ok(field)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn potential(&self) -> Potential {
        self.potential
    }

    pub fn tilt(&self) -> [f64; 2] {
        self.tilt
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Langevin time elapsed since construction.
    pub fn time(&self) -> f64 {
        self.step_count as f64 * self.h
    }

    #[inline]
    fn wrap(&self, v: i32) -> usize {
        v.rem_euclid(self.side as i32) as usize
    }

    /// Periodic part of the height at a (torus-wrapped) site.
    pub fn psi(&self, s: Site) -> f64 {
        self.psi[self.wrap(s.y) * self.side + self.wrap(s.x)]
    }

    /// Height gradient across the edge leaving `s` in direction `dir`,
    /// tilt included.
    pub fn gradient(&self, s: Site, dir: EdgeDir) -> f64 {
        let (nb, u) = match dir {
            EdgeDir::East => (site(s.x + 1, s.y), self.tilt[0]),
            EdgeDir::North => (site(s.x, s.y + 1), self.tilt[1]),
        };
        self.psi(nb) - self.psi(s) + u
    }

    /// Spatial mean of the gradient in direction `dir`; exactly the tilt
    /// component, because the periodic part telescopes on the torus.
    pub fn mean_gradient(&self, dir: EdgeDir) -> f64 {
        let l = self.side;
        let mut acc = 0.0;
        for y in 0..l {
            for x in 0..l {
                acc += self.gradient(site(x as i32, y as i32), dir);
            }
        }
        acc / (l * l) as f64
    }

    /// One Euler step with the full noise.
    pub fn step(&mut self) -> Result<(), DynamicError> {
        self.step_scaled(1.0)
    }

    /// One Euler step with the noise scaled by `noise` (zero gives the
    /// deterministic gradient flow).
    pub fn step_scaled(&mut self, noise: f64) -> Result<(), DynamicError> {
        let l = self.side;
        let li = l as i32;
        let h = self.h;
        let amp = (2.0 * h).sqrt() * noise;
        let (u1, u2) = (self.tilt[0], self.tilt[1]);
        let mut stream = Stream::keyed(self.seed, &[0x5DE9, self.step_count]);
        let mut checksum = 0.0f64;
        for y in 0..li {
            let yp = (y + 1).rem_euclid(li) as usize * l;
            let ym = (y - 1).rem_euclid(li) as usize * l;
            let y0 = y as usize * l;
            for x in 0..li {
                let xp = (x + 1).rem_euclid(li) as usize;
                let xm = (x - 1).rem_euclid(li) as usize;
                let i = y0 + x as usize;
                let p = self.psi[i];
                // sum of V' over the four incident gradients, oriented away
                // from the site; the tilt enters with the sign of the step
                let drift = self.potential.v_prime(self.psi[y0 + xp] - p + u1)
                    + self.potential.v_prime(self.psi[y0 + xm] - p - u1)
                    + self.potential.v_prime(self.psi[yp + x as usize] - p + u2)
                    + self.potential.v_prime(self.psi[ym + x as usize] - p - u2);
                let z: f64 = if noise == 0.0 { 0.0 } else { stream.sample(StandardNormal) };
                let next = p + h * drift + amp * z;
                self.scratch[i] = next;
                checksum += next;
            }
        }
        if !checksum.is_finite() {
            return Err(DynamicError::NonFiniteHeights(self.step_count));
        }
        std::mem::swap(&mut self.psi, &mut self.scratch);
        self.step_count += 1;
        Ok(())
    }

    /// Advances by (approximately) `time` units of Langevin time.
    pub fn run(&mut self, time: f64) -> Result<(), DynamicError> {
        let steps = (time / self.h).round() as u64;
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Spatially averaged squared height increment at separation `n` along
    /// the first axis: the single-snapshot variance estimator.
    pub fn increment_second_moment(&self, n: i32) -> f64 {
        let l = self.side;
        let shift = (n.rem_euclid(l as i32)) as usize;
        let mut acc = 0.0;
        for y in 0..l {
            let row = y * l;
            for x in 0..l {
                let d = self.psi[row + (x + shift) % l] - self.psi[row + x];
                acc += d * d;
            }
        }
        acc / (l * l) as f64
    }
}

/// One Euler update, returning the advanced field. Thin wrapper over
/// `InterfaceField::step` for callers that treat the field as a value.
pub fn interface_step(mut field: InterfaceField) -> Result<InterfaceField, DynamicError> {
    field.step()?;
    Ok(field)
}

/// Reads the induced conductance frame off the current heights: the edge
/// `{x, y}` carries `V''(phi(y) - phi(x))`. The window must fit on the
/// torus; the frame is a plain static environment centred at the torus
/// origin.
pub fn hs_conductances(
    field: &InterfaceField,
    half_width: i32,
) -> Result<StaticEnvironment, DynamicError> {
    let window = Window::new(half_width);
    if 2 * half_width as usize + 1 > field.side {
        return Err(DynamicError::WindowExceedsTorus {
            half_width,
            side: field.side,
        });
    }
    let l = half_width;
    let side = (2 * l + 1) as usize;
    let mut raw = vec![0.0; 2 * side * side];
    for y in -l..=l {
        for x in -l..=l {
            let base = 2 * ((y + l) as usize * side + (x + l) as usize);
            let s = site(x, y);
            if x < l {
                raw[base] = field.potential.v_second(field.gradient(s, EdgeDir::East));
            }
            if y < l {
                raw[base + 1] = field.potential.v_second(field.gradient(s, EdgeDir::North));
            }
        }
    }
    let (c_lo, c_hi) = field.potential.curvature_bounds();
    let metadata_law = if c_lo == c_hi {
        ConductanceLaw::new(1.0, PositiveLaw::Constant { c: c_lo })
    } else {
        ConductanceLaw::new(1.0, PositiveLaw::Uniform { lo: c_lo, hi: c_hi })
    }
    .expect("curvature bounds form a valid law");
    Ok(StaticEnvironment::from_raw(window, metadata_law, field.seed, raw)?)
}

/// Torus Laplacian eigenvalue along one axis.
#[inline]
fn axis_eigenvalue(k: usize, side: usize) -> f64 {
    2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / side as f64).cos()
}

/// Exact stationary variance of `phi(x) - phi(0)` for the quadratic
/// potential: the Gaussian field with covariance the pseudo-inverse of the
/// torus Laplacian, so
/// `var = (2/L^2) sum_{k != 0} (1 - cos(2 pi k . x / L)) / lambda_k`.
pub fn torus_gaussian_variance(side: usize, x: Site) -> f64 {
    mode_weighted_variance(side, x, |lam| 1.0 / lam)
}

/// Stationary variance of the same increment under the Euler chain with
/// step `h` (quadratic potential): each mode is an autoregressive process
/// with stationary variance `1/(lambda (1 - h lambda/2))`. Used to budget
/// the discretization bias of the step-halving pair exactly.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn euler_chain_variance(side: usize, x: Site, h: f64) -> f64 {
    mode_weighted_variance(side, x, |lam| 1.0 / (lam * (1.0 - h * lam / 2.0)))
}

fn mode_weighted_variance(side: usize, x: Site, mode_var: impl Fn(f64) -> f64) -> f64 {
    let l = side;
    let tau = 2.0 * std::f64::consts::PI / l as f64;
    let (c1, s1): (Vec<f64>, Vec<f64>) = (0..l)
        .map(|k| {
            let a = tau * k as f64 * x.x as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let (c2, s2): (Vec<f64>, Vec<f64>) = (0..l)
        .map(|k| {
            let a = tau * k as f64 * x.y as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let mut acc = 0.0;
    for k2 in 0..l {
        let lam2 = axis_eigenvalue(k2, l);
        for k1 in 0..l {
            if k1 == 0 && k2 == 0 {
                continue;
            }
            let lam = axis_eigenvalue(k1, l) + lam2;
            // cos(a + b) expanded from the per-axis tables
            let cos_kx = c1[k1] * c2[k2] - s1[k1] * s2[k2];
            acc += (1.0 - cos_kx) * mode_var(lam);
        }
    }
    2.0 * acc / (l * l) as f64
}

/// Exact sample of the zero-mean stationary Gaussian field: white noise
/// shaped by `1/sqrt(lambda_k)` in Fourier space.
fn gaussian_free_field(side: usize, seed: u64) -> Vec<f64> {
    let l = side;
    let mut stream = Stream::keyed(seed, &[0x6FF0]);
    let mut grid: Vec<Complex<f64>> = (0..l * l)
        .map(|_| Complex::new(stream.sample(StandardNormal), 0.0))
        .collect();

    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(l);
    let inverse = planner.plan_fft_inverse(l);

    // 2D transform: rows in place, then columns through a strided copy
    for row in grid.chunks_exact_mut(l) {
        forward.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); l];
    for x in 0..l {
        for y in 0..l {
            col[y] = grid[y * l + x];
        }
        forward.process(&mut col);
        for y in 0..l {
            grid[y * l + x] = col[y];
        }
    }

    for k2 in 0..l {
        let lam2 = axis_eigenvalue(k2, l);
        for k1 in 0..l {
            let i = k2 * l + k1;
            if k1 == 0 && k2 == 0 {
                grid[i] = Complex::new(0.0, 0.0);
                continue;
            }
            let lam = axis_eigenvalue(k1, l) + lam2;
            grid[i] /= lam.sqrt();
        }
    }

    for row in grid.chunks_exact_mut(l) {
        inverse.process(row);
    }
    for x in 0..l {
        for y in 0..l {
            col[y] = grid[y * l + x];
        }
        inverse.process(&mut col);
        for y in 0..l {
            grid[y * l + x] = col[y];
        }
    }

    let scale = 1.0 / (l * l) as f64;
    grid.into_iter().map(|z| z.re * scale).collect()
}

/// One row of the variance-scaling table.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceRow {
    pub n: i32,
    /// Step-extrapolated estimate of `var[phi(n e_1) - phi(0)]`.
    pub variance: f64,
    /// Batch-means standard error (both chains combined).
    pub std_error: f64,
    /// Gap between the coarse- and fine-step estimates. The extrapolation
    /// residual is at most a quarter of this gap while the step sizes sit
    /// inside the stability bound, so `std_error` plus a quarter `step_gap`
    /// is a full error budget.
    pub step_gap: f64,
    /// Exact Gaussian value for the quadratic potential on this torus.
    pub gaussian_oracle: f64,
}

/// Variance-versus-separation table with its fitted logarithmic slope.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceScaling {
    pub rows: Vec<VarianceRow>,
    /// Weighted least-squares slope of `variance` against `ln n`.
    pub fitted_slope: f64,
    pub slope_std_error: f64,
    pub torus_side: usize,
    pub step_sizes: (f64, f64),
    /// Set when batch means drift between the first and second half of the
    /// run: the sampler has not reached stationarity.
    pub drift_flag: bool,
}

/// Long-run Langevin estimate of the height-increment variances
/// `var[phi(n e_1) - phi(0)]` for each `n` in the grid, with the default
/// step-halving pair.
pub fn variance_scaling(
    potential: Potential,
    tilt: [f64; 2],
    side: usize,
    n_grid: &[i32],
    burn_in: f64,
    sample_time: f64,
    seed: u64,
) -> Result<VarianceScaling, DynamicError> {
    variance_scaling_with(potential, tilt, side, n_grid, burn_in, sample_time, RICHARDSON_STEPS, seed)
}

/// As `variance_scaling` with an explicit `(h, h/2)`-style step pair: each
/// chain runs the same Langevin time, per-`n` batch means give errors, and
/// the two chains combine as `2 v_fine - v_coarse` to cancel the leading
/// discretization bias.
pub fn variance_scaling_with(
    potential: Potential,
    tilt: [f64; 2],
    side: usize,
    n_grid: &[i32],
    burn_in: f64,
    sample_time: f64,
    steps: (f64, f64),
    seed: u64,
) -> Result<VarianceScaling, DynamicError> {
    potential.validate()?;
    if n_grid.is_empty() {
        return Err(DynamicError::TooFewSamples { needed: 1, got: 0 });
    }
    for &n in n_grid {
        if n <= 0 || 2 * n as usize >= side {
            return Err(DynamicError::BadTorus(side));
        }
    }
    const BATCHES: usize = 16;
    let batch_time = sample_time / BATCHES as f64;
    if batch_time <= 0.0 {
        return Err(DynamicError::BadTime(sample_time));
    }

    // batch means per n for one chain
    let chain = |h: f64, chain_seed: u64| -> Result<Vec<Vec<f64>>, DynamicError> {
        let mut field = InterfaceField::new_equilibrated(side, potential, tilt, h, chain_seed)?;
        field.run(burn_in)?;
        let thin = 0.5f64.min(batch_time / 4.0);
        let snaps_per_batch = (batch_time / thin).round().max(1.0) as usize;
        let mut batches = vec![Vec::with_capacity(BATCHES); n_grid.len()];
        for _ in 0..BATCHES {
            let mut acc = vec![0.0f64; n_grid.len()];
            for _ in 0..snaps_per_batch {
                field.run(thin)?;
                for (j, &n) in n_grid.iter().enumerate() {
                    acc[j] += field.increment_second_moment(n);
                }
            }
            for (j, a) in acc.iter().enumerate() {
                batches[j].push(a / snaps_per_batch as f64);
            }
        }
        Ok(batches)
    };

    let coarse = chain(steps.0, Stream::keyed(seed, &[1]).next_u64())?;
    let fine = chain(steps.1, Stream::keyed(seed, &[2]).next_u64())?;

    let stats = |b: &[f64]| {
        let m = b.iter().sum::<f64>() / b.len() as f64;
        let var = b.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b.len() - 1) as f64;
        (m, (var / b.len() as f64).sqrt())
    };
    let drift = |b: &[f64]| {
        let half = b.len() / 2;
        let (m1, e1) = stats(&b[..half]);
        let (m2, e2) = stats(&b[half..]);
        (m1 - m2).abs() > 3.0 * (e1 * e1 + e2 * e2).sqrt() + 1e-12
    };

    let mut rows = Vec::with_capacity(n_grid.len());
    let mut drift_flag = false;
    for (j, &n) in n_grid.iter().enumerate() {
        let (vc, ec) = stats(&coarse[j]);
        let (vf, ef) = stats(&fine[j]);
        drift_flag |= drift(&coarse[j]) || drift(&fine[j]);
        rows.push(VarianceRow {
            n,
            variance: 2.0 * vf - vc,
            std_error: (4.0 * ef * ef + ec * ec).sqrt(),
            step_gap: (vc - vf).abs(),
            gaussian_oracle: torus_gaussian_variance(side, site(n, 0)),
        });
    }

    // weighted least squares of variance against ln n
    let w: Vec<f64> = rows.iter().map(|r| 1.0 / r.std_error.max(1e-12).powi(2)).collect();
    let sw: f64 = w.iter().sum();
    let xbar = rows
        .iter()
        .zip(&w)
        .map(|(r, w)| w * (r.n as f64).ln())
        .sum::<f64>()
        / sw;
    let ybar = rows.iter().zip(&w).map(|(r, w)| w * r.variance).sum::<f64>() / sw;
    let sxx: f64 = rows
        .iter()
        .zip(&w)
        .map(|(r, w)| w * ((r.n as f64).ln() - xbar).powi(2))
        .sum();
    let sxy: f64 = rows
        .iter()
        .zip(&w)
        .map(|(r, w)| w * ((r.n as f64).ln() - xbar) * (r.variance - ybar))
        .sum();
    let fitted_slope = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    let slope_std_error = if sxx > 0.0 { (1.0 / sxx).sqrt() } else { f64::NAN };

    Ok(VarianceScaling {
        rows,
        fitted_slope,
        slope_std_error,
        torus_side: side,
        step_sizes: steps,
        drift_flag,
    })
}
