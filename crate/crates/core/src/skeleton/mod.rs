//! Skeleton-bending width certificates.
//!
//! Pipeline: translate the unit lattice so its k-skeleton meets a mass-1
//! body in controlled volume, build the piecewise-linear retraction Ψ
//! that pushes space onto the skeleton (its stretched cells confined to
//! a thin collar of the dual skeleton), bend a family of parallel
//! k-planes through Ψ, and report the largest weighted fiber mass as a
//! certified upper bound for the k-width.

pub mod certify;
pub mod fiber;
pub mod psi;
pub mod svg;
pub mod tile;

pub use certify::{
    certify_function_width, certify_width_volume, choose_translate, product_fiber_width,
    CertifyOptions, FiberWidthReport, WidthReport,
};
pub use fiber::{bend_fiber, generic_fiber_frame, BendReport, FiberFrame};
pub use psi::{build_psi, SkeletonComplex};
pub use tile::{CanonicalTile, TileFrame};
