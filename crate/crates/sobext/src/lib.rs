//! Constructive extension of planar boundary homeomorphisms to Sobolev
//! homeomorphisms of the half-space, together with the numerical energy
//! diagnostics that decide when such extensions exist.
//!
//! The pipeline, bottom to top:
//!
//! * [`plgeom`]: exact-predicate planar primitives (orientation, segment
//!   classification, triangulation, constant-speed curves).
//! * [`dyadic`]: dyadic decompositions of the unit square and cube surface,
//!   and vertex-shifted grids whose cell boundaries carry controlled energy.
//! * [`maps`]: the zoo of boundary homeomorphisms under study.
//! * [`geodesic`]: shortest paths in simple polygons (funnel plus an
//!   independent visibility-graph oracle) and the shortest-curve extension
//!   of a boundary embedding.
//! * [`linearize`]: piecewise-linear replacement of image grids that keeps
//!   lengths, marked points and cross-level intersections under control.
//! * [`homotopy`]: curve and cross deformations used to sweep one grid
//!   level into the next.
//! * [`ext3d`]: the layered 3D extension assembled from slice maps.
//! * [`injective`]: strict-monotonization machinery that upgrades the
//!   layered map to an injection.
//! * [`analysis`]: energy sums, fractional seminorm estimators, and the
//!   equivalence / decay / distortion diagnostics.
//! * [`verify`]: the end-to-end verification battery used by the CLI and
//!   the acceptance test suite.

pub mod analysis;
pub mod dyadic;
pub mod error;
pub mod ext3d;
pub mod geodesic;
pub mod homotopy;
pub mod injective;
pub mod linearize;
pub mod maps;
pub mod plgeom;
pub mod report;
pub mod verify;

pub use error::{Error, Result};
