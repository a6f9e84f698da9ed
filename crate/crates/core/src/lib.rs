//! Batch toolkit for organ perfusion modelling on voxel data.
//!
//! The crate covers the full chain from a raw density volume to a dynamic
//! contrast simulation:
//!
//! 1. [`volume`] — volume data model, file I/O, phantoms and image filters
//! 2. [`segment`] — seed-driven graph-cut segmentation of the parenchyma
//! 3. [`mesh`] — surface extraction, Taubin smoothing, tetrahedral meshing
//! 4. [`vessel`] — vessel mask extraction, 3D thinning, centerline graphs
//! 5. [`tree`] — vascular tree model and constructive-optimization synthesis
//! 6. [`flow1d`] — steady Bernoulli flow in branching trees
//! 7. [`darcy`] — multicompartment Darcy pressure solve on tetrahedra
//! 8. [`transport`] — upwind finite-volume tracer transport
//! 9. [`pipeline`] — configuration, orchestration and file export
//!
//! All geometry is in millimetres, time in seconds, pressure in pascals.
//! Density values use the consistent mass unit Pa·s²/mm².

pub mod darcy;
pub mod error;
pub mod flow1d;
pub mod geom;
pub mod mesh;
pub mod pipeline;
pub mod segment;
pub mod sparse;
pub mod transport;
pub mod tree;
pub mod vessel;
pub mod volume;
pub mod vtk;

pub use error::{Error, Result};
