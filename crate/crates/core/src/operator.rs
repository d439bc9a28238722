//! The walk's generator on finite domains and its Dirichlet problems.
//!
//! For a conductance field `w` and speed measure `theta`, the generator acts
//! on functions by
//!
//! ```text
//! (L f)(x) = (1/theta(x)) * sum_{y ~ x} w({x,y}) (f(y) - f(x)).
//! ```
//!
//! Killing a domain `A` at its complement gives two linear problems solved
//! here:
//!
//! * the killed Green function `g_A(., y)`, the occupation density of the
//!   walk started anywhere in `A` and absorbed outside, solving
//!   `L u = -1_y / theta(y)` in `A`, `u = 0` off `A`;
//! * the harmonic extension of boundary data `F`, solving `L h = 0` in `A`,
//!   `h = F` on the exterior neighbours of `A`.
//!
//! Multiplying the row at `x` by `theta(x)` symmetrizes both problems into
//! `M u = b` with `M = D - W`, where `W` holds the conductances between
//! domain sites and `D` the total incident conductance (edges leaving the
//! domain included; they are the killing terms). `M` is positive definite
//! as soon as every component of the domain has an open edge to its
//! complement. Notably `M` does not depend on the speed measure, which is
//! why killed Green functions and harmonic extensions are speed-invariant;
//! the assembly still routes every entry through `theta` so that both speed
//! measures exercise the same code path.
//!
//! Systems are solved by Jacobi-preconditioned conjugate gradients to a
//! relative residual of `1e-10` with an iteration cap of `50 sqrt(|A|)`.

use crate::environment::{ConductanceField, EnvironmentError, SpeedMeasure};
use crate::lattice::{neighbors, Edge, Site};
use serde::Serialize;
use std::collections::{HashMap, HashSet, VecDeque};
use std::time::Instant;

/// Relative residual targeted by the conjugate-gradient solver.
pub const SOLVER_TOLERANCE: f64 = 1e-10;

/// Iteration cap as a multiple of `sqrt(|A|)`.
pub const SOLVER_ITER_FACTOR: f64 = 50.0;

/// Sparse symmetric form of the killed generator on an ordered site list.
pub struct Generator {
    pub(crate) sites: Vec<Site>,
    pub(crate) index: HashMap<Site, u32>,
    pub(crate) speed: SpeedMeasure,
    pub(crate) theta: Vec<f64>,
    /// Total jump rate `mu(x)/theta(x)` per site.
    pub(crate) rate_total: Vec<f64>,
    /// CSR of interior jump rates `w({x,y})/theta(x)`.
    pub(crate) row_ptr: Vec<u32>,
    pub(crate) col: Vec<u32>,
    pub(crate) rate: Vec<f64>,
    /// Open edges leaving the domain: `(row, exterior site, rate)`.
    pub(crate) ext: Vec<(u32, Site, f64)>,
}

/// Convergence record of one linear solve.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub unknowns: usize,
    pub iterations: usize,
    pub relative_residual: f64,
    pub tolerance: f64,
    pub wall_seconds: f64,
}

/// Killed Green function `g_A(., y)` on a domain.
pub struct KilledGreen {
    sites: Vec<Site>,
    index: HashMap<Site, u32>,
    values: Vec<f64>,
    source: Site,
    report: SolveReport,
}

impl KilledGreen {
    /// `g_A(x, y)`; zero for `x` outside the domain (the walk started there
    /// is absorbed immediately).
    pub fn value(&self, x: Site) -> f64 {
        self.index.get(&x).map(|&i| self.values[i as usize]).unwrap_or(0.0)
    }

    pub fn source(&self) -> Site {
        self.source
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn report(&self) -> &SolveReport {
        &self.report
    }
}

impl Generator {
    /// Assembles the generator for `domain` under the given speed measure.
    /// Domain sites must be distinct and interior to the window (all four
    /// incident edges realized).
    pub fn assemble<C: ConductanceField>(
        env: &C,
        speed: SpeedMeasure,
        domain: &[Site],
    ) -> Result<Generator, OperatorError> {
        if domain.is_empty() {
            return Err(OperatorError::EmptyDomain);
        }
        let hw = env.half_width();
        let mut index = HashMap::with_capacity(domain.len());
        for (i, &s) in domain.iter().enumerate() {
            if s.x.abs() >= hw || s.y.abs() >= hw {
                return Err(OperatorError::NotInterior { site: s, half_width: hw });
            }
            if index.insert(s, i as u32).is_some() {
                return Err(OperatorError::DuplicateSite(s));
            }
        }

        let n = domain.len();
        let mut theta = Vec::with_capacity(n);
        let mut rate_total = Vec::with_capacity(n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col = Vec::new();
        let mut rate = Vec::new();
        let mut ext = Vec::new();
        row_ptr.push(0u32);

        for (i, &s) in domain.iter().enumerate() {
            let th = env.theta(s, speed)?;
            if !(th > 0.0) {
                return Err(OperatorError::IsolatedSite(s));
            }
            let mut total = 0.0;
            for nb in neighbors(s) {
                let w = env.conductance(Edge::between(s, nb))?;
                if w <= 0.0 {
                    continue;
                }
                let r = w / th;
                total += r;
                match index.get(&nb) {
                    Some(&j) => {
                        col.push(j);
                        rate.push(r);
                    }
                    None => ext.push((i as u32, nb, r)),
                }
            }
            theta.push(th);
            rate_total.push(total);
            row_ptr.push(col.len() as u32);
        }

        Ok(Generator {
            sites: domain.to_vec(),
            index,
            speed,
            theta,
            rate_total,
            row_ptr,
            col,
            rate,
            ext,
        })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn speed(&self) -> SpeedMeasure {
        self.speed
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn theta_at(&self, i: usize) -> f64 {
        self.theta[i]
    }

    /// Applies the generator to `f`, given by a closure that must also be
    /// defined on the exterior neighbours of the domain.
    pub fn apply<F: Fn(Site) -> f64>(&self, f: F) -> Vec<f64> {
        let vals: Vec<f64> = self.sites.iter().map(|&s| f(s)).collect();
        let mut out = vec![0.0; self.len()];
        for i in 0..self.len() {
            let mut acc = -self.rate_total[i] * vals[i];
            for k in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                acc += self.rate[k] * vals[self.col[k] as usize];
            }
            out[i] = acc;
        }
        for &(i, s, r) in &self.ext {
            out[i as usize] += r * f(s);
        }
        out
    }

    pub(crate) fn index_of(&self, s: Site) -> Option<usize> {
        self.index.get(&s).map(|&i| i as usize)
    }

    /// One step of the uniformized chain acting on a distribution:
    /// `out = v P` with `P = I + L/lambda` killed off the domain.
    /// Returns the probability mass absorbed during the step.
    pub(crate) fn uniformized_step(&self, lambda: f64, v: &[f64], out: &mut [f64]) -> f64 {
        let n = self.len();
        let inv = 1.0 / lambda;
        for i in 0..n {
            out[i] = v[i] * (1.0 - self.rate_total[i] * inv);
        }
        for i in 0..n {
            let c = v[i] * inv;
            if c == 0.0 {
                continue;
            }
            for k in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                out[self.col[k] as usize] += self.rate[k] * c;
            }
        }
        let mut lost = 0.0;
        for &(i, _, r) in &self.ext {
            lost += v[i as usize] * r * inv;
        }
        lost
    }

    /// Symmetrized matrix-vector product `v -> M v`,
    /// `M = theta (R_total - R)` row by row.
    fn matvec(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.len() {
            let mut acc = self.rate_total[i] * v[i];
            for k in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                acc -= self.rate[k] * v[self.col[k] as usize];
            }
            out[i] = self.theta[i] * acc;
        }
    }

    /// Jacobi-preconditioned conjugate gradients for `M u = b`.
    fn solve_cg(&self, b: &[f64]) -> Result<(Vec<f64>, SolveReport), OperatorError> {
        let n = self.len();
        let start = Instant::now();
        let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if b_norm == 0.0 {
            return Ok((
                vec![0.0; n],
                SolveReport {
                    unknowns: n,
                    iterations: 0,
                    relative_residual: 0.0,
                    tolerance: SOLVER_TOLERANCE,
                    wall_seconds: start.elapsed().as_secs_f64(),
                },
            ));
        }

        let inv_diag: Vec<f64> = (0..n)
            .map(|i| {
                let d = self.theta[i] * self.rate_total[i];
                if d <= 0.0 {
                    0.0 // flagged below: a zero-rate site cannot leak
                } else {
                    1.0 / d
                }
            })
            .collect();
        if inv_diag.iter().any(|&d| d == 0.0) {
            return Err(OperatorError::SingularDomain);
        }

        let max_iter = (SOLVER_ITER_FACTOR * (n as f64).sqrt()).ceil() as usize + 8;
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        let mut res = b_norm;

        for it in 0..max_iter {
            if res <= SOLVER_TOLERANCE * b_norm {
                return Ok((
                    x,
                    SolveReport {
                        unknowns: n,
                        iterations: it,
                        relative_residual: res / b_norm,
                        tolerance: SOLVER_TOLERANCE,
                        wall_seconds: start.elapsed().as_secs_f64(),
                    },
                ));
            }
            self.matvec(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(OperatorError::SingularDomain);
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Err(OperatorError::NoConvergence {
            iterations: max_iter,
            relative_residual: res / b_norm,
        })
    }
}

/// Solves for the killed Green function `g_A(., y)` of the domain `A`.
///
/// The system is restricted to the connected component of `y` inside `A`
/// along open edges; the solution is exactly zero on the rest of `A`. If
/// `y` does not belong to `A` the Green function vanishes identically and
/// no solve is performed.
pub fn killed_green<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    domain: &[Site],
    y: Site,
) -> Result<KilledGreen, OperatorError> {
    if domain.is_empty() {
        return Err(OperatorError::EmptyDomain);
    }
    let domain_set: HashSet<Site> = domain.iter().copied().collect();
    if domain_set.len() != domain.len() {
        let dup = domain
            .iter()
            .find(|s| domain.iter().filter(|t| t == s).count() > 1)
            .copied()
            .unwrap();
        return Err(OperatorError::DuplicateSite(dup));
    }

    if !domain_set.contains(&y) {
        // the source is killed instantly: g_A(., y) = 0
        let index = domain
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i as u32))
            .collect();
        return Ok(KilledGreen {
            sites: domain.to_vec(),
            index,
            values: vec![0.0; domain.len()],
            source: y,
            report: SolveReport {
                unknowns: 0,
                iterations: 0,
                relative_residual: 0.0,
                tolerance: SOLVER_TOLERANCE,
                wall_seconds: 0.0,
            },
        });
    }

    // component of y within A along open edges
    let mut comp = Vec::new();
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(y);
    queue.push_back(y);
    while let Some(s) = queue.pop_front() {
        comp.push(s);
        for nb in neighbors(s) {
            if domain_set.contains(&nb)
                && !seen.contains(&nb)
                && env.conductance(Edge::between(s, nb))? > 0.0
            {
                seen.insert(nb);
                queue.push_back(nb);
            }
        }
    }
    comp.sort();

    let gen = Generator::assemble(env, speed, &comp)?;
    if gen.ext.is_empty() {
        return Err(OperatorError::SingularDomain);
    }

    // right-hand side after symmetrization: theta(y) * (1/theta(y)) at y
    let mut b = vec![0.0; comp.len()];
    let yi = gen.index[&y] as usize;
    b[yi] = gen.theta[yi] * (1.0 / gen.theta[yi]);

    let (u, report) = gen.solve_cg(&b)?;

    // scatter the component solution back onto the full domain
    let index: HashMap<Site, u32> = domain
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i as u32))
        .collect();
    let mut values = vec![0.0; domain.len()];
    for (ci, &s) in gen.sites.iter().enumerate() {
        values[index[&s] as usize] = u[ci];
    }
    Ok(KilledGreen { sites: domain.to_vec(), index, values, source: y, report })
}

/// Harmonic extension of boundary data: solves `L h = 0` on `A` with
/// `h = boundary` on every exterior neighbour of `A` reachable through an
/// open edge. Every component of `A` must have such an edge.
pub fn harmonic_extension<C: ConductanceField, F: Fn(Site) -> f64>(
    env: &C,
    speed: SpeedMeasure,
    domain: &[Site],
    boundary: F,
) -> Result<(Vec<f64>, SolveReport), OperatorError> {
    let gen = Generator::assemble(env, speed, domain)?;

    // every component must leak; label components along open interior edges
    let n = gen.len();
    let mut comp_of = vec![u32::MAX; n];
    let mut leaks: Vec<bool> = Vec::new();
    for i in 0..n {
        if comp_of[i] != u32::MAX {
            continue;
        }
        let c = leaks.len() as u32;
        leaks.push(false);
        let mut stack = vec![i];
        comp_of[i] = c;
        while let Some(v) = stack.pop() {
            for k in gen.row_ptr[v] as usize..gen.row_ptr[v + 1] as usize {
                let u = gen.col[k] as usize;
                if comp_of[u] == u32::MAX {
                    comp_of[u] = c;
                    stack.push(u);
                }
            }
        }
    }
    for &(i, _, _) in &gen.ext {
        leaks[comp_of[i as usize] as usize] = true;
    }
    if !leaks.iter().all(|&l| l) {
        return Err(OperatorError::SingularDomain);
    }

    // b(x) = theta(x) * sum over exterior neighbours of rate * F
    let mut b = vec![0.0; n];
    for &(i, s, r) in &gen.ext {
        b[i as usize] += gen.theta[i as usize] * r * boundary(s);
    }
    gen.solve_cg(&b)
}

/// Value at `x` of the harmonic extension: `E_x[F(X_{tau_A})]`, the expected
/// boundary datum at the exit site. Does not depend on the speed measure.
pub fn exit_functional<C: ConductanceField, F: Fn(Site) -> f64>(
    env: &C,
    x: Site,
    domain: &[Site],
    boundary: F,
) -> Result<f64, OperatorError> {
    let pos = domain
        .iter()
        .position(|&s| s == x)
        .ok_or(OperatorError::SiteNotInDomain(x))?;
    let (h, _) = harmonic_extension(env, SpeedMeasure::Vsrw, domain, boundary)?;
    Ok(h[pos])
}

/// Exit law of the walk started at `x` and killed outside `A`: the list of
/// exterior sites together with `P_x[X_{tau_A} = b]`, obtained from one
/// killed-Green solve through `P_x[exit at b] = sum_u g_A(x, u) w(u, b)`.
/// Sites are listed in sorted order; the probabilities sum to one up to
/// solver tolerance. Speed-invariant.
pub fn exit_distribution<C: ConductanceField>(
    env: &C,
    domain: &[Site],
    x: Site,
) -> Result<Vec<(Site, f64)>, OperatorError> {
    if !domain.contains(&x) {
        return Err(OperatorError::SiteNotInDomain(x));
    }
    let g = killed_green(env, SpeedMeasure::Vsrw, domain, x)?;
    let domain_set: HashSet<Site> = domain.iter().copied().collect();
    let mut probs: HashMap<Site, f64> = HashMap::new();
    for (&s, &v) in g.sites.iter().zip(g.values.iter()) {
        if v == 0.0 {
            continue;
        }
        for nb in neighbors(s) {
            if !domain_set.contains(&nb) {
                let w = env.conductance(Edge::between(s, nb))?;
                if w > 0.0 {
                    *probs.entry(nb).or_insert(0.0) += v * w;
                }
            }
        }
    }
    let mut out: Vec<(Site, f64)> = probs.into_iter().collect();
    out.sort_by_key(|(s, _)| (s.x, s.y));
    Ok(out)
}

/// Expected exit time `E_x[tau_A]`, from the occupation-time identity
/// `E_x[tau_A] = sum_y g_A(x, y) theta(y)`.
pub fn expected_exit_time<C: ConductanceField>(
    env: &C,
    speed: SpeedMeasure,
    domain: &[Site],
    x: Site,
) -> Result<f64, OperatorError> {
    if !domain.contains(&x) {
        return Err(OperatorError::SiteNotInDomain(x));
    }
    let g = killed_green(env, speed, domain, x)?;
    let mut t = 0.0;
    for (&s, &v) in g.sites.iter().zip(g.values.iter()) {
        if v != 0.0 {
            t += v * env.theta(s, speed)?;
        }
    }
    Ok(t)
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum OperatorError {
    #[error("domain is empty")]
    EmptyDomain,
    #[error("duplicate domain site {0}")]
    DuplicateSite(Site),
    #[error("site {site} is not interior to the window (half-width {half_width}); enlarge the window")]
    NotInterior { site: Site, half_width: i32 },
    #[error("site {0} has no open incident edge")]
    IsolatedSite(Site),
    #[error("site {0} not in the domain")]
    SiteNotInDomain(Site),
    #[error("domain has a component with no open edge to its complement; the killed problem is singular")]
    SingularDomain,
    #[error("conjugate gradients stalled after {iterations} iterations at relative residual {relative_residual:.3e}")]
    NoConvergence { iterations: usize, relative_residual: f64 },
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
}
