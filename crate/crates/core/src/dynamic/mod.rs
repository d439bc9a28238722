//! Time-dynamic conductances: environments that change while the walk
//! moves, the annealed (environment-averaged) kernels built on them, and
//! the gradient-interface model whose Langevin dynamics drives such an
//! environment through second derivatives of the potential.
//!
//! Dynamic environments are piecewise constant in time: a frame duration
//! `frame_dt` and a rule producing the conductance frame for each slot
//! `[k dt, (k+1) dt)`. The rule is either synthetic (constant, alternating,
//! or freshly sampled frames) or an interface simulation emitting frames as
//! it evolves. All quantitative machinery assumes uniform ellipticity
//! `c_lo <= w_t(e) <= c_hi`; environments whose law cannot guarantee a
//! positive lower bound are still simulable but are flagged degenerate and
//! carry no quantitative claims.
//!
//! The walk itself is the variable-speed walk (unit site weights): holding
//! rates equal `mu_t(x)` and change as the environment does. Trajectories
//! are sampled by thinning against the dominating rate `4 c_hi`, which is
//! exact in law for any measurable time dependence.

mod annealed;
mod interface;

pub use annealed::{
    annealed_density, annealed_gradient_curve, annealed_potential, log_log_slope,
    required_half_width, AnnealedKernelEstimate, GradientPoint,
};
pub use interface::{
    hs_conductances, interface_step, torus_gaussian_variance, variance_scaling,
    variance_scaling_with, InterfaceField, Potential, VarianceRow, VarianceScaling,
    RICHARDSON_STEPS,
};

use crate::environment::{ConductanceField, ConductanceLaw, EnvironmentError, StaticEnvironment};
use crate::lattice::{neighbors, Edge, Site, Window};
use crate::montecarlo::Trajectory;
use crate::rng::Stream;
use serde::Serialize;
use std::collections::HashMap;

/// Almost-sure bounds on every conductance of a dynamic environment.
/// `c_lo = 0` marks the degenerate (diagnostic-only) regime.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EllipticityBounds {
    pub c_lo: f64,
    pub c_hi: f64,
}

impl EllipticityBounds {
    pub fn is_elliptic(&self) -> bool {
        self.c_lo > 0.0 && self.c_hi.is_finite()
    }
}

/// Rule generating the conductance frame for each time slot.
#[derive(Clone, Debug)]
pub enum DynamicKind {
    /// The same frame forever: degenerate dynamics, equal in law to the
    /// static model.
    Constant { law: ConductanceLaw },
    /// Two frames used on even and odd slots.
    Alternating { even: ConductanceLaw, odd: ConductanceLaw },
    /// A fresh independent frame per slot (fast i.i.d. dynamics).
    IidFrames { law: ConductanceLaw },
    /// Frames read off a gradient-interface simulation: the conductance of
    /// an edge is the curvature of the potential at the current gradient.
    Interface {
        side: usize,
        potential: Potential,
        tilt: [f64; 2],
        step: f64,
        /// Langevin time to run before the first frame is emitted.
        equilibration: f64,
    },
}

/// A family of dynamic environments: everything except the seed.
#[derive(Clone, Debug)]
pub struct DynamicLaw {
    pub frame_dt: f64,
    pub window: Window,
    pub kind: DynamicKind,
}

impl DynamicLaw {
    /// Almost-sure conductance bounds implied by the frame rule.
    pub fn bounds(&self) -> EllipticityBounds {
        let law_bounds = |law: &ConductanceLaw| {
            let lo = if law.p_open < 1.0 { 0.0 } else { law.law.essential_inf() };
            (lo, law.law.essential_sup())
        };
        let (c_lo, c_hi) = match &self.kind {
            DynamicKind::Constant { law } | DynamicKind::IidFrames { law } => law_bounds(law),
            DynamicKind::Alternating { even, odd } => {
                let (ae, be) = law_bounds(even);
                let (ao, bo) = law_bounds(odd);
                (ae.min(ao), be.max(bo))
            }
            DynamicKind::Interface { potential, .. } => potential.curvature_bounds(),
        };
        EllipticityBounds { c_lo, c_hi }
    }

    /// Realizes one dynamic environment. The dominating rate used by the
    /// exact thinning sampler is `4 c_hi`, so the upper bound must be
    /// finite; heavy-tailed marginals are rejected here.
    pub fn realize(&self, seed: u64) -> Result<DynamicEnvironment, DynamicError> {
        if !(self.frame_dt > 0.0 && self.frame_dt.is_finite()) {
            return Err(DynamicError::BadFrameDt(self.frame_dt));
        }
        let bounds = self.bounds();
        if !bounds.c_hi.is_finite() {
            return Err(DynamicError::UnboundedLaw { c_hi: bounds.c_hi });
        }
        let driver = match &self.kind {
            DynamicKind::Interface { side, potential, tilt, step, equilibration } => {
                let mut field =
                    InterfaceField::new_equilibrated(*side, *potential, *tilt, *step, seed)?;
                if *equilibration > 0.0 {
                    field.run(*equilibration)?;
                }
                let per_frame = (self.frame_dt / *step).round();
                if per_frame < 1.0 || (per_frame * *step - self.frame_dt).abs() > 1e-9 {
                    return Err(DynamicError::FrameStepMismatch {
                        frame_dt: self.frame_dt,
                        step: *step,
                    });
                }
                Some(InterfaceDriver { field, steps_per_frame: per_frame as u64, emitted: 0 })
            }
            _ => None,
        };
        Ok(DynamicEnvironment {
            law: self.clone(),
            bounds,
            seed,
            frames: HashMap::new(),
            driver,
        })
    }
}

struct InterfaceDriver {
    field: InterfaceField,
    steps_per_frame: u64,
    emitted: usize,
}

/// One realized dynamic environment: frames materialize lazily and are
/// cached, each validated against the declared ellipticity bounds.
pub struct DynamicEnvironment {
    law: DynamicLaw,
    bounds: EllipticityBounds,
    seed: u64,
    frames: HashMap<usize, StaticEnvironment>,
    driver: Option<InterfaceDriver>,
}

impl DynamicEnvironment {
    pub fn frame_dt(&self) -> f64 {
        self.law.frame_dt
    }

    pub fn window(&self) -> Window {
        self.law.window
    }

    pub fn bounds(&self) -> EllipticityBounds {
        self.bounds
    }

    /// Slot index active at time `t`.
    pub fn slot_at(&self, t: f64) -> usize {
        (t / self.law.frame_dt).floor().max(0.0) as usize
    }

    /// The conductance frame for slot `k`.
    pub fn frame(&mut self, k: usize) -> Result<&StaticEnvironment, DynamicError> {
        let key = match self.law.kind {
            DynamicKind::Constant { .. } => 0,
            DynamicKind::Alternating { .. } => k % 2,
            _ => k,
        };
        if !self.frames.contains_key(&key) {
            let frame = self.build_frame(key)?;
            Self::validate_frame(self.bounds, &frame)?;
            self.frames.insert(key, frame);
        }
        Ok(&self.frames[&key])
    }

    fn build_frame(&mut self, key: usize) -> Result<StaticEnvironment, DynamicError> {
        let window = self.law.window;
        match &self.law.kind {
            DynamicKind::Constant { law } => Ok(StaticEnvironment::sample(*law, window, self.seed)),
            DynamicKind::Alternating { even, odd } => {
                let law = if key % 2 == 0 { even } else { odd };
                let seed = Stream::keyed(self.seed, &[0xA17E, key as u64]).next_u64();
                Ok(StaticEnvironment::sample(*law, window, seed))
            }
            DynamicKind::IidFrames { law } => {
                let seed = Stream::keyed(self.seed, &[0xF4A3, key as u64]).next_u64();
                Ok(StaticEnvironment::sample(*law, window, seed))
            }
            DynamicKind::Interface { .. } => {
                let window = self.law.window;
                let bounds = self.bounds;
                let driver = self.driver.as_mut().expect("interface kind has a driver");
                if key < driver.emitted {
                    // older frames were cached; a miss here means the cache
                    // was never populated for this slot, which cannot happen
                    // with monotone generation
                    return Err(DynamicError::FrameRewind { requested: key });
                }
                // advance the field, caching any intermediate frames
                while driver.emitted < key {
                    let k = driver.emitted;
                    let frame = Self::emit_interface_frame(driver, window)?;
                    Self::validate_frame(bounds, &frame)?;
                    self.frames.insert(k, frame);
                    driver.emitted += 1;
                }
                let frame = Self::emit_interface_frame(driver, window)?;
                driver.emitted += 1;
                Ok(frame)
            }
        }
    }

    fn emit_interface_frame(
        driver: &mut InterfaceDriver,
        window: Window,
    ) -> Result<StaticEnvironment, DynamicError> {
        let frame = hs_conductances(&driver.field, window.half_width())?;
        for _ in 0..driver.steps_per_frame {
            driver.field.step()?;
        }
        Ok(frame)
    }

    fn validate_frame(
        bounds: EllipticityBounds,
        frame: &StaticEnvironment,
    ) -> Result<(), DynamicError> {
        let lo = bounds.c_lo;
        let hi = bounds.c_hi;
        for &w in frame.raw() {
            if w > hi * (1.0 + 1e-12) {
                return Err(DynamicError::EllipticityViolation { value: w, lo, hi });
            }
            // raw storage keeps zeros for edges leaving the window, so the
            // lower bound can only be checked on positive entries; closed
            // edges are legal exactly in the degenerate regime
            if lo > 0.0 && w > 0.0 && w < lo * (1.0 - 1e-12) {
                return Err(DynamicError::EllipticityViolation { value: w, lo, hi });
            }
        }
        Ok(())
    }
}

/// Exact sampling of the time-inhomogeneous walk by thinning: proposals
/// arrive at the constant dominating rate `4 c_hi`; a proposal at time `t`
/// becomes a jump with probability `mu_t(x) / (4 c_hi)`, and the jump goes
/// to a neighbour with probability proportional to the current
/// conductances. Unit site weights throughout (variable speed).
pub fn simulate_inhomogeneous(
    denv: &mut DynamicEnvironment,
    x0: Site,
    horizon: f64,
    seed: u64,
) -> Result<Trajectory, DynamicError> {
    if !(horizon >= 0.0) {
        return Err(DynamicError::BadHorizon(horizon));
    }
    let hw = denv.window().half_width();
    let frame_check = |s: Site| s.x.abs() >= hw || s.y.abs() >= hw;
    if frame_check(x0) {
        return Err(DynamicError::StartOnFrame(x0));
    }
    let lambda = 4.0 * denv.bounds.c_hi;
    let mut stream = Stream::keyed(seed, &[0xD11A, zig(x0.x), zig(x0.y)]);
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut site = x0;
    let mut aborted = false;

    if lambda > 0.0 {
        loop {
            t += stream.next_exp(lambda);
            if t > horizon {
                break;
            }
            let slot = denv.slot_at(t);
            let frame = denv.frame(slot)?;
            let nbs = neighbors(site);
            let mut w = [0.0f64; 4];
            let mut mu = 0.0;
            for (i, &nb) in nbs.iter().enumerate() {
                let c = frame.conductance(Edge::between(site, nb))?;
                w[i] = c;
                mu += c;
            }
            if mu > lambda * (1.0 + 1e-12) {
                return Err(DynamicError::EllipticityViolation {
                    value: mu / 4.0,
                    lo: denv.bounds.c_lo,
                    hi: denv.bounds.c_hi,
                });
            }
            if stream.next_f64() * lambda >= mu {
                continue; // thinned: no jump at this proposal
            }
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
            if frame_check(site) {
                aborted = true;
                break;
            }
        }
    }

    Ok(Trajectory { start: x0, horizon, seed, jumps, aborted })
}

fn zig(v: i32) -> u64 {
    ((v as i64) << 1 ^ ((v as i64) >> 63)) as u64
}

/// Moment report for the dynamic regularity exponents: requires
/// `1/(p-1) + 1/((p-1)q) + 1/q < 1` together with finite `E[w^p]` and
/// `E[w^{-q}]` per frame.
#[derive(Clone, Debug, Serialize)]
pub struct DynamicMomentReport {
    pub p: f64,
    pub q: f64,
    /// `1/(p-1) + 1/((p-1)q) + 1/q`; admissible iff strictly below one.
    pub exponent_sum: f64,
    pub exponent_ok: bool,
    pub e_w_p: f64,
    pub e_w_neg_q: f64,
    pub moments_finite: bool,
    pub satisfied: bool,
}

pub fn check_dynamic_moments(
    law: &ConductanceLaw,
    p: f64,
    q: f64,
) -> Result<DynamicMomentReport, DynamicError> {
    if !(p > 1.0) || !(q > 0.0) {
        return Err(DynamicError::BadExponents { p, q });
    }
    let exponent_sum = 1.0 / (p - 1.0) + 1.0 / ((p - 1.0) * q) + 1.0 / q;
    let exponent_ok = exponent_sum < 1.0;
    let e_w_p = law.moment(p);
    let e_w_neg_q = law.moment(-q);
    let moments_finite = e_w_p.is_finite() && e_w_neg_q.is_finite();
    Ok(DynamicMomentReport {
        p,
        q,
        exponent_sum,
        exponent_ok,
        e_w_p,
        e_w_neg_q,
        moments_finite,
        satisfied: exponent_ok && moments_finite,
    })
}

#[derive(thiserror::Error, Debug)]
pub enum DynamicError {
    #[error("frame duration {0} must be positive and finite")]
    BadFrameDt(f64),
    #[error("horizon {0} is not a finite nonnegative number")]
    BadHorizon(f64),
    #[error("start {0} lies on the window frame; enlarge the window")]
    StartOnFrame(Site),
    #[error("conductance {value} outside the declared bounds [{lo}, {hi}]")]
    EllipticityViolation { value: f64, lo: f64, hi: f64 },
    #[error("dominating rate needs a finite upper conductance bound, got {c_hi}")]
    UnboundedLaw { c_hi: f64 },
    #[error("frame duration {frame_dt} is not a positive multiple of the interface step {step}")]
    FrameStepMismatch { frame_dt: f64, step: f64 },
    #[error("interface frames advance monotonically; slot {requested} was never cached")]
    FrameRewind { requested: usize },
    #[error("exponents p={p}, q={q} must satisfy p > 1, q > 0")]
    BadExponents { p: f64, q: f64 },
    #[error("time {0} is not positive")]
    BadTime(f64),
    #[error("window half-width {half_width} too small for horizon {horizon}; need at least {required}")]
    WindowTooSmall { required: i32, half_width: i32, horizon: f64 },
    #[error("torus side {0} must be at least 4 and larger than twice every separation")]
    BadTorus(usize),
    #[error("window half-width {half_width} does not fit on a torus of side {side}")]
    WindowExceedsTorus { half_width: i32, side: usize },
    #[error("step {step} exceeds the stability bound 0.1/c_plus = {bound}")]
    BadStep { step: f64, bound: f64 },
    #[error("anharmonicity {0} must lie in [0, 1) to keep the curvature positive")]
    BadEpsilon(f64),
    #[error("interface heights became non-finite at step {0}")]
    NonFiniteHeights(u64),
    #[error("quadrature needs 0 < t_switch <= t_cut, got t_cut {t_cut}")]
    BadQuadrature { t_cut: f64 },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
}
