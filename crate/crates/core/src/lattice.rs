//! Geometry of the square lattice `Z^2`.
//!
//! Conventions used throughout the crate:
//!
//! * graph balls `B(x, r) = { y : |y - x|_1 < r }` use the l1 (graph) metric
//!   with a *strict* inequality, so `ball(x, 1) = {x}` and the exit sites of
//!   a ball of radius `r` lie exactly on the l1 sphere of radius `r`;
//! * target regions for scaling limits are *Euclidean* annuli
//!   `K = { x in R^2 : k1 <= |x|_2 <= k2 }`, probed on a deterministic polar
//!   mesh;
//! * an undirected edge is stored in canonical form: its endpoint with the
//!   lexicographically smaller `(x, y)` pair first, which makes the edge a
//!   usable hash/RNG key regardless of traversal direction.

use serde::{Deserialize, Serialize};

/// A lattice site with integer coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Site {
    pub x: i32,
    pub y: i32,
}

/// `site(x, y)` reads better than `Site { x, y }` in formula-heavy code.
#[inline]
pub const fn site(x: i32, y: i32) -> Site {
    Site { x, y }
}

impl Site {
    pub const ORIGIN: Site = site(0, 0);

    /// l1 (graph) distance.
    #[inline]
    pub fn l1(&self, other: Site) -> i64 {
        (self.x as i64 - other.x as i64).abs() + (self.y as i64 - other.y as i64).abs()
    }

    /// l-infinity distance (used for window membership).
    #[inline]
    pub fn linf(&self, other: Site) -> i64 {
        (self.x as i64 - other.x as i64)
            .abs()
            .max((self.y as i64 - other.y as i64).abs())
    }

    /// Euclidean norm of the site seen as a point of `R^2`.
    #[inline]
    pub fn norm2(&self) -> f64 {
        ((self.x as f64).powi(2) + (self.y as f64).powi(2)).sqrt()
    }

    /// Squared Euclidean distance to a real point (exact in f64 for the
    /// coordinate ranges used here).
    #[inline]
    pub fn dist2_sq(&self, p: [f64; 2]) -> f64 {
        let dx = self.x as f64 - p[0];
        let dy = self.y as f64 - p[1];
        dx * dx + dy * dy
    }

    #[inline]
    pub fn offset(&self, dx: i32, dy: i32) -> Site {
        site(self.x + dx, self.y + dy)
    }
}

impl std::ops::Add for Site {
    type Output = Site;
    fn add(self, rhs: Site) -> Site {
        site(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Site {
    type Output = Site;
    fn sub(self, rhs: Site) -> Site {
        site(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Neg for Site {
    type Output = Site;
    fn neg(self) -> Site {
        site(-self.x, -self.y)
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// The four nearest neighbours in the fixed order east, west, north, south.
/// Every iteration over incident edges in the crate uses this order, which
/// pins down floating-point summation order and hence bit-level determinism.
#[inline]
pub fn neighbors(s: Site) -> [Site; 4] {
    [
        site(s.x + 1, s.y),
        site(s.x - 1, s.y),
        site(s.x, s.y + 1),
        site(s.x, s.y - 1),
    ]
}

/// Axis of an edge leaving its canonical endpoint.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum EdgeDir {
    East,
    North,
}

/// An undirected nearest-neighbour edge in canonical form: `a` is the
/// lexicographically smaller endpoint and the edge points east or north.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Edge {
    pub a: Site,
    pub dir: EdgeDir,
}

impl Edge {
    /// Canonicalizes the unordered pair `{u, v}`. Panics if the sites are
    /// not nearest neighbours; edge construction from non-adjacent sites is
    /// always a programming error, not a data error.
    pub fn between(u: Site, v: Site) -> Edge {
        let (a, b) = if (u.x, u.y) <= (v.x, v.y) { (u, v) } else { (v, u) };
        if b == site(a.x + 1, a.y) {
            Edge { a, dir: EdgeDir::East }
        } else if b == site(a.x, a.y + 1) {
            Edge { a, dir: EdgeDir::North }
        } else {
            panic!("sites {u} and {v} are not nearest neighbours");
        }
    }

    /// The endpoint other than `a`.
    #[inline]
    pub fn b(&self) -> Site {
        match self.dir {
            EdgeDir::East => site(self.a.x + 1, self.a.y),
            EdgeDir::North => site(self.a.x, self.a.y + 1),
        }
    }
}

/// The centered box `[-L, L]^2` on which an environment is realized.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Window {
    half_width: i32,
}

impl Window {
    pub fn new(half_width: i32) -> Window {
        assert!(half_width >= 1, "window half-width must be positive");
        Window { half_width }
    }

    #[inline]
    pub fn half_width(&self) -> i32 {
        self.half_width
    }

    #[inline]
    pub fn contains(&self, s: Site) -> bool {
        s.x.abs() <= self.half_width && s.y.abs() <= self.half_width
    }

    /// True if all four edges incident to `s` lie inside the window. Only
    /// interior sites are admissible for operator domains; the outermost
    /// frame has incomplete stencils.
    #[inline]
    pub fn is_interior(&self, s: Site) -> bool {
        s.x.abs() < self.half_width && s.y.abs() < self.half_width
    }

    pub fn num_sites(&self) -> usize {
        let side = 2 * self.half_width as usize + 1;
        side * side
    }

    /// All sites of the window in row-major order (y outer, x inner), the
    /// order used by the snapshot format.
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        let l = self.half_width;
        (-l..=l).flat_map(move |y| (-l..=l).map(move |x| site(x, y)))
    }
}

/// Graph ball `{ y : |y - center|_1 < r }`, listed in row-major order.
/// Contains `2r^2 - 2r + 1` sites for `r >= 1`.
pub fn ball(center: Site, r: i32) -> Vec<Site> {
    assert!(r >= 1, "ball radius must be >= 1");
    let mut out = Vec::with_capacity((2 * r as usize).pow(2));
    for dy in -(r - 1)..=(r - 1) {
        let w = r - 1 - dy.abs();
        for dx in -w..=w {
            out.push(site(center.x + dx, center.y + dy));
        }
    }
    out
}

/// Sites at l1 distance exactly `r` from `center` (the exit shell of
/// `ball(center, r)`), `4r` of them for `r >= 1`.
pub fn sphere(center: Site, r: i32) -> Vec<Site> {
    assert!(r >= 1, "sphere radius must be >= 1");
    let mut out = Vec::with_capacity(4 * r as usize);
    for dy in -r..=r {
        let w = r - dy.abs();
        if w == 0 {
            out.push(site(center.x, center.y + dy));
        } else {
            out.push(site(center.x - w, center.y + dy));
            out.push(site(center.x + w, center.y + dy));
        }
    }
    out
}

/// Euclidean annulus `{ x : k1 <= |x|_2 <= k2 }` used as the compact target
/// region of the scaling statements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub k1: f64,
    pub k2: f64,
}

impl Annulus {
    pub fn new(k1: f64, k2: f64) -> Result<Annulus, LatticeError> {
        if !(k1.is_finite() && k2.is_finite()) || k1 <= 0.0 || k2 < k1 {
            return Err(LatticeError::BadAnnulus { k1, k2 });
        }
        Ok(Annulus { k1, k2 })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        self.k1 <= r && r <= self.k2
    }
}

/// Resolution of the polar probe mesh on an annulus.
///
/// Doubling `angles` and replacing `radii` by `2*radii - 1` produces a
/// strict superset of the coarser mesh, so suprema taken over refined
/// meshes are monotone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshResolution {
    pub radii: usize,
    pub angles: usize,
}

impl Default for MeshResolution {
    fn default() -> Self {
        MeshResolution { radii: 16, angles: 64 }
    }
}

/// Deterministic polar mesh of the annulus: `radii` evenly spaced radii
/// (both endpoints included) times `angles` evenly spaced angles.
pub fn annulus_targets(k: Annulus, mesh: MeshResolution) -> Result<Vec<[f64; 2]>, LatticeError> {
    if mesh.radii == 0 || mesh.angles == 0 {
        return Err(LatticeError::EmptyMesh(mesh));
    }
    let mut out = Vec::with_capacity(mesh.radii * mesh.angles);
    for i in 0..mesh.radii {
        let r = if mesh.radii == 1 {
            0.5 * (k.k1 + k.k2)
        } else {
            k.k1 + (k.k2 - k.k1) * i as f64 / (mesh.radii - 1) as f64
        };
        for j in 0..mesh.angles {
            let th = 2.0 * std::f64::consts::PI * j as f64 / mesh.angles as f64;
            out.push([r * th.cos(), r * th.sin()]);
        }
    }
    Ok(out)
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid annulus: need 0 < k1 <= k2, got k1={k1}, k2={k2}")]
    BadAnnulus { k1: f64, k2: f64 },
    #[error("mesh resolution {0:?} produces no points")]
    EmptyMesh(MeshResolution),
}
