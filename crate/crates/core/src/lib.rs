//! Local/global model-order reduction for quasi-static failure of damageable
//! bar lattices.
//!
//! Displacement unknowns far from the damage front are approximated in a POD
//! basis while those near it are solved exactly; the two are coupled through
//! static condensation and an augmented conjugate gradient, with optional
//! on-the-fly corrections of the basis.

pub mod adaptivity;
pub mod cli;
pub mod error;
pub mod frame;
pub mod krylov;
pub mod lattice;
pub mod localglobal;
pub mod nonlinear;
pub mod pod;
pub mod skyline;
pub mod sparse;

pub use error::{Error, Result};
pub use frame::{build_frame_lattice, FrameSpec};
pub use lattice::{DamageState, LatticeModel, MaterialLaw, TangentMode};
