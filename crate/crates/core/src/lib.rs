//! Monte-Carlo diffusion-MRI voxel simulation and two-stage diffusion-spectrum
//! fitting.
//!
//! The crate models a cubic tissue voxel containing a square lattice of axon
//! cylinders and a cubic lattice of cell spheres, walks water spins through it,
//! synthesizes pulsed-gradient spin-echo signals, and recovers compartment
//! fractions with a regularized NNLS spectrum decomposition followed by a
//! two-component restricted-anisotropic fit selected by BIC.
//!
//! Internal units are micrometres and milliseconds throughout; conversions to
//! mm^2/s and s/mm^2 happen only at file boundaries.

pub mod config;
pub mod experiment;
pub mod geometry;
pub mod nnls;
pub mod quadrature;
pub mod rads;
pub mod report;
pub mod rng;
pub mod sequence;
pub mod spectrafit;
pub mod stats;
pub mod svg;
pub mod units;
pub mod validate;
pub mod walker;

pub use geometry::{Compartment, VoxelGeometry, VoxelSpec};
pub use sequence::{GradientScheme, PgseAcquisition, SignalVector};
pub use spectrafit::{BasisGrid, FitParams, SpectrumFit};
pub use walker::{SpinEnsemble, WalkConfig};
