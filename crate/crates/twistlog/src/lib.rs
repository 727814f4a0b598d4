//! Exact construction of twisted logarithmic Fock modules over a Heisenberg
//! Lie algebra, together with machine verification of the algebraic identities
//! these modules are required to satisfy (commutation relations, locality,
//! the Borcherds identity, equivariance under the twist, Virasoro structure).
//!
//! All arithmetic is exact: scalars live in a cyclotomic number field extended
//! by a formal transcendental standing for 2*pi*i.  No floating point is used
//! anywhere.

pub mod scalar;
pub mod twist;
pub mod loop_algebra;
pub mod fock;
pub mod fields;
pub mod virasoro;
pub mod cli;

use scalar::Rat;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A root of unity or eigenvalue was requested whose denominator does not
    /// divide the session conductor.
    #[error("conductor mismatch: denominator of {value} does not divide conductor {conductor}")]
    ConductorMismatch { value: String, conductor: u32 },

    /// Inversion of zero or of a scalar of positive transcendental degree.
    #[error("scalar is not invertible: {0}")]
    NotInvertible(String),

    /// A matrix expected to be (uni)nilpotent was not.
    #[error("matrix is not nilpotent: {0}")]
    NotNilpotent(String),

    /// Structural validation of twist data failed.
    #[error("invalid twist data: {0}")]
    InvalidTwist(String),

    /// A mode exponent does not lie in the coset attached to the basis vector.
    #[error("coset mismatch: exponent {exponent} is not in the coset {coset} + Z")]
    CosetMismatch { exponent: Rat, coset: Rat },

    /// An element with a t^0 component outside the fixed subspace has no
    /// triangular part.
    #[error("no triangular decomposition: {0}")]
    NoTriangularPart(String),

    /// Application of an operator outside its exactness window.
    #[error("operator applied outside its exactness window: {0}")]
    WindowExceeded(String),

    /// Sum or comparison of operators with different energy shifts.
    #[error("energy shift mismatch: {left} vs {right}")]
    EnergyShiftMismatch { left: Rat, right: Rat },

    /// Dimension mismatch between operators, vectors or matrices.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A module or session spec failed validation.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Malformed textual input (rationals, spec files, CLI values).
    #[error("parse error: {0}")]
    Parse(String),

    /// I/O wrapper for the CLI layer.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization wrapper for the CLI layer.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
