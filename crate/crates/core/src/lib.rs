//! Numerical laboratory for planar random walks among random conductances.
//!
//! The crate builds finite windows of an i.i.d. conductance field on the
//! square lattice, runs the variable- and constant-speed random walks on
//! them, and measures the objects a two-dimensional theory cares about:
//! killed Green functions, heat kernels and their local limits, the
//! recurrent potential kernel, percolation geometry of the open cluster,
//! and dynamic (time-varying) conductances including gradient-field
//! interfaces.
//!
//! Everything is deterministic given a seed: randomness flows through
//! counter-based streams keyed by coordinates, so results do not depend on
//! window size, evaluation order, or thread count.

pub mod dynamic;
pub mod environment;
pub mod harness;
pub mod heatkernel;
pub mod lattice;
pub mod montecarlo;
pub mod operator;
pub mod percolation;
pub mod potential;
pub mod rng;

pub use dynamic::{DynamicEnvironment, DynamicKind, DynamicLaw, InterfaceField, Potential};
pub use environment::{ConductanceField, ConductanceLaw, PositiveLaw, SpeedMeasure, StaticEnvironment};
pub use lattice::{ball, site, sphere, Annulus, Edge, EdgeDir, MeshResolution, Site, Window};
pub use montecarlo::{estimate_sigma, exit_statistics, gbar_from, simulate, SigmaEstimate, Trajectory};
pub use operator::{killed_green, Generator, KilledGreen, SolveReport};
pub use percolation::ClusterGeometry;
pub use rng::Stream;
