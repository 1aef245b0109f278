//! Simulation and verification tools for the planar discrete Gaussian free
//! field and the matched random energy model.
//!
//! The crate covers lattice approximations of planar domains, Green functions,
//! exact Gaussian sampling, Gibbs measures at several temperatures, overlap
//! statistics on finite lattices, and the limiting decorated Poisson point
//! process with its Poisson-Dirichlet weights.

// `!(x > 0.0)` guards are written that way so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod error;
pub mod fields;
pub mod greens;
pub mod lattice;
pub mod limitproc;
pub mod linalg;
pub mod overlap;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use fields::{FieldModel, FieldSample, GibbsWeights};
pub use greens::{CholFactor, GreenMatrix, PotentialKernelTable};
pub use lattice::{build_lattice, DomainSpec, Lattice, Site, SubsetMask};
pub use limitproc::{DecorationField, DecorationModel, PointConfiguration, QEstimate};
pub use overlap::OverlapEstimate;
pub use rng::{SeedSource, StreamRng};

/// Critical inverse temperature `sqrt(2 pi)`.
pub const BETA_C: f64 = 2.506_628_274_631_000_2;

/// Variance growth constant `2 / pi` of the field, `Var h_x ~ g log N`.
pub const G: f64 = std::f64::consts::FRAC_2_PI;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants() {
        assert_eq!(BETA_C, (2.0 * std::f64::consts::PI).sqrt());
        assert!((2.0 / G.sqrt() - BETA_C).abs() < 1e-15);
    }
}
