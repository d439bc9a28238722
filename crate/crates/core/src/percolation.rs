//! Open-cluster geometry of an environment.
//!
//! An edge is open when its conductance is strictly positive; open clusters
//! are the connected components of the open subgraph. On a finite window the
//! infinite cluster is approximated by the largest component, together with
//! a flag recording whether it touches all four sides of the window (a
//! finite-volume proxy for "spanning"). The density of the largest
//! component estimates the percolation density used in scaling constants.

use crate::environment::{ConductanceField, ConductanceLaw, EnvironmentError, StaticEnvironment};
use crate::lattice::{ball, neighbors, site, Edge, Site, Window};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{HashMap, HashSet, VecDeque};

/// Union-find over window sites with path compression and union by size.
struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let gp = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = gp;
            i = gp;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

/// Cluster labeling of a whole window.
pub struct ClusterGeometry {
    window: Window,
    /// Component id per site (row-major), `u32::MAX` never used.
    label: Vec<u32>,
    /// Component sizes indexed by id.
    sizes: Vec<usize>,
    giant: u32,
    touches: [bool; 4],
}

impl ClusterGeometry {
    /// Labels all open clusters of the environment.
    pub fn analyze(env: &StaticEnvironment) -> ClusterGeometry {
        let window = env.window();
        let l = window.half_width();
        let side = (2 * l + 1) as usize;
        let n = window.num_sites();
        let idx = |s: Site| -> usize { ((s.y + l) as usize) * side + (s.x + l) as usize };

        let mut uf = DisjointSets::new(n);
        for s in window.sites() {
            let east = site(s.x + 1, s.y);
            if window.contains(east) && env.conductance(Edge::between(s, east)).unwrap() > 0.0 {
                uf.union(idx(s) as u32, idx(east) as u32);
            }
            let north = site(s.x, s.y + 1);
            if window.contains(north) && env.conductance(Edge::between(s, north)).unwrap() > 0.0 {
                uf.union(idx(s) as u32, idx(north) as u32);
            }
        }

        // compact root ids into consecutive labels
        let mut label = vec![0u32; n];
        let mut root_to_label: HashMap<u32, u32> = HashMap::new();
        let mut sizes: Vec<usize> = Vec::new();
        for i in 0..n {
            let root = uf.find(i as u32);
            let lbl = *root_to_label.entry(root).or_insert_with(|| {
                sizes.push(0);
                (sizes.len() - 1) as u32
            });
            label[i] = lbl;
            sizes[lbl as usize] += 1;
        }

        let giant = sizes
            .iter()
            .enumerate()
            .max_by_key(|(_, &s)| s)
            .map(|(i, _)| i as u32)
            .unwrap();

        let mut touches = [false; 4]; // west, east, south, north
        for k in -l..=l {
            if label[idx(site(-l, k))] == giant {
                touches[0] = true;
            }
            if label[idx(site(l, k))] == giant {
                touches[1] = true;
            }
            if label[idx(site(k, -l))] == giant {
                touches[2] = true;
            }
            if label[idx(site(k, l))] == giant {
                touches[3] = true;
            }
        }

        ClusterGeometry { window, label, sizes, giant, touches }
    }

    pub fn window(&self) -> Window {
        self.window
    }

    #[inline]
    fn idx(&self, s: Site) -> Option<usize> {
        if !self.window.contains(s) {
            return None;
        }
        let l = self.window.half_width();
        let side = (2 * l + 1) as usize;
        Some(((s.y + l) as usize) * side + (s.x + l) as usize)
    }

    /// Component id of a site, or an error outside the window.
    pub fn component_id(&self, s: Site) -> Result<u32, EnvironmentError> {
        self.idx(s)
            .map(|i| self.label[i])
            .ok_or(EnvironmentError::OutOfWindow { site: s, half_width: self.window.half_width() })
    }

    /// Is `s` on the largest open cluster of the window?
    pub fn on_giant(&self, s: Site) -> bool {
        self.idx(s).map(|i| self.label[i] == self.giant).unwrap_or(false)
    }

    pub fn giant_size(&self) -> usize {
        self.sizes[self.giant as usize]
    }

    /// Density of the largest cluster in the window.
    pub fn giant_density(&self) -> f64 {
        self.giant_size() as f64 / self.window.num_sites() as f64
    }

    /// Does the largest cluster touch all four window sides?
    pub fn giant_spans(&self) -> bool {
        self.touches.iter().all(|&t| t)
    }

    pub fn num_components(&self) -> usize {
        self.sizes.len()
    }

    /// Sites of the largest cluster, in row-major order.
    pub fn giant_sites(&self) -> Vec<Site> {
        self.window
            .sites()
            .filter(|&s| self.label[self.idx(s).unwrap()] == self.giant)
            .collect()
    }

    /// Closest giant-cluster site to the real point `n * x` (Euclidean
    /// distance, lexicographic tie-break). This is the discretization map
    /// sending a macroscopic target to the cluster. Errors if the window
    /// holds no giant-cluster site at all.
    pub fn nearest_cluster_point(&self, x: [f64; 2], n: f64) -> Result<Site, PercolationError> {
        let p = [n * x[0], n * x[1]];
        let l = self.window.half_width();
        let cx = (p[0].round() as i32).clamp(-l, l);
        let cy = (p[1].round() as i32).clamp(-l, l);
        let center = site(cx, cy);

        // expanding square rings around the rounded target; once a hit is
        // found at l-inf radius r, any closer Euclidean point lies within
        // ring ceil(sqrt(2) r) + 1, so scan a little further and compare.
        let mut best: Option<(f64, Site)> = None;
        let max_ring = 2 * l;
        let mut stop_ring = max_ring;
        let consider = |s: Site, best: &mut Option<(f64, Site)>| {
            if self.on_giant(s) {
                let d = s.dist2_sq(p);
                let better = match best {
                    None => true,
                    Some((bd, bs)) => {
                        d < *bd - 1e-12
                            || ((d - *bd).abs() <= 1e-12 && (s.x, s.y) < (bs.x, bs.y))
                    }
                };
                if better {
                    *best = Some((d, s));
                }
            }
        };
        for r in 0..=max_ring {
            if r > stop_ring {
                break;
            }
            if r == 0 {
                consider(center, &mut best);
            } else {
                for dx in -r..=r {
                    consider(site(center.x + dx, center.y + r), &mut best);
                    consider(site(center.x + dx, center.y - r), &mut best);
                }
                for dy in (-r + 1)..=(r - 1) {
                    consider(site(center.x + r, center.y + dy), &mut best);
                    consider(site(center.x - r, center.y + dy), &mut best);
                }
            }
            if best.is_some() && stop_ring == max_ring {
                // +2 covers rounding of the center and the l2/l-inf gap
                stop_ring = ((2.0f64).sqrt() * (r as f64 + 2.0)).ceil() as i32;
            }
        }
        best.map(|(_, s)| s).ok_or(PercolationError::NoClusterSite)
    }

    /// Chemical (graph) distance between two sites along open edges within
    /// the window, by breadth-first search. `None` if not connected.
    pub fn chemical_distance(
        &self,
        env: &StaticEnvironment,
        from: Site,
        to: Site,
    ) -> Result<Option<u64>, EnvironmentError> {
        if self.idx(from).is_none() {
            return Err(EnvironmentError::OutOfWindow {
                site: from,
                half_width: self.window.half_width(),
            });
        }
        if self.idx(to).is_none() {
            return Err(EnvironmentError::OutOfWindow {
                site: to,
                half_width: self.window.half_width(),
            });
        }
        if self.component_id(from)? != self.component_id(to)? {
            return Ok(None);
        }
        let mut dist: HashMap<Site, u64> = HashMap::new();
        let mut queue = VecDeque::new();
        dist.insert(from, 0);
        queue.push_back(from);
        while let Some(s) = queue.pop_front() {
            let d = dist[&s];
            if s == to {
                return Ok(Some(d));
            }
            for nb in neighbors(s) {
                if self.window.contains(nb)
                    && !dist.contains_key(&nb)
                    && env.conductance(Edge::between(s, nb))? > 0.0
                {
                    dist.insert(nb, d + 1);
                    queue.push_back(nb);
                }
            }
        }
        Ok(None) // unreachable: same component id guarantees a path
    }
}

/// Connected component of `center` inside `ball(center, r)` along open
/// edges, by breadth-first search within the ball. Empty error if `center`
/// is isolated is not possible; the component always contains `center`.
pub fn component_in_ball<C: ConductanceField>(
    env: &C,
    center: Site,
    r: i32,
) -> Result<Vec<Site>, EnvironmentError> {
    let allowed: HashSet<Site> = ball(center, r).into_iter().collect();
    let mut seen: HashSet<Site> = HashSet::new();
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    seen.insert(center);
    queue.push_back(center);
    while let Some(s) = queue.pop_front() {
        out.push(s);
        for nb in neighbors(s) {
            if allowed.contains(&nb)
                && !seen.contains(&nb)
                && env.conductance(Edge::between(s, nb))? > 0.0
            {
                seen.insert(nb);
                queue.push_back(nb);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Monte Carlo estimate of the giant-cluster density across environments.
#[derive(Clone, Debug, Serialize)]
pub struct ThetaEstimate {
    pub theta_hat: f64,
    pub std_error: f64,
    pub num_envs: usize,
    /// Fraction of sampled environments whose largest cluster spans the
    /// window; low values flag that the window is too small for the law.
    pub spanning_fraction: f64,
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum PercolationError {
    #[error("window contains no cluster site")]
    NoClusterSite,
    #[error("estimate needs at least two environments, got {0}")]
    TooFewEnvironments(usize),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
}

/// Estimates the giant-cluster density by sampling `num_envs` environments
/// with seeds `seed, seed+1, ...` and averaging the largest-component
/// density. Environments are processed in parallel; aggregation is by seed
/// order, so the result does not depend on the thread count.
pub fn estimate_theta(
    law: ConductanceLaw,
    window: Window,
    seed: u64,
    num_envs: usize,
) -> Result<ThetaEstimate, PercolationError> {
    if num_envs < 2 {
        return Err(PercolationError::TooFewEnvironments(num_envs));
    }
    let per_env: Vec<(f64, bool)> = (0..num_envs as u64)
        .into_par_iter()
        .map(|i| {
            let env = StaticEnvironment::sample(law, window, seed.wrapping_add(i));
            let geo = ClusterGeometry::analyze(&env);
            (geo.giant_density(), geo.giant_spans())
        })
        .collect();
    let n = per_env.len() as f64;
    let mean = per_env.iter().map(|(d, _)| d).sum::<f64>() / n;
    let var = per_env.iter().map(|(d, _)| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let spanning = per_env.iter().filter(|(_, s)| *s).count() as f64 / n;
    Ok(ThetaEstimate {
        theta_hat: mean,
        std_error: (var / n).sqrt(),
        num_envs,
        spanning_fraction: spanning,
    })
}
