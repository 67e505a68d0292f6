//! Learning quantum-channel mappings from density-matrix observation pairs.
//!
//! The library maximizes a quadratic total-fidelity form `⟨B|S|B⟩` over
//! partially unitary operators (and Kraus stacks) under orthogonality,
//! gauge, and trace-preservation constraints — a quadratically constrained
//! quadratic program solved by an iterative generalized-eigenproblem
//! algorithm. On top of the solver sit a hierarchy of S-orthogonal unitary
//! levels assembling mixed unitary channels, and the ground-state time
//! evolution of the learned operator.
//!
//! Module map:
//! - [`matfun`] — dense symmetric eigendecomposition, matrix functions,
//!   generalized symmetric eigenproblem, null-space bases.
//! - [`rng`] — seedable SplitMix64 generator with Box–Muller normals.
//! - [`states`] — density matrices, channels, fidelity measures, datasets.
//! - [`superop`] — the superoperator tensor S and its quadratic forms.
//! - [`qcqp`] — the iterative solver with Lagrange multipliers, helper
//!   constraints, and the adjustment procedures.
//! - [`hierarchy`] — S-orthogonal unitary levels and mixed unitary channels.
//! - [`dynamics`] — ground-state evolution of the learned operator.
//!
//! All numerics are real/orthogonal; the complex phases intrinsic to time
//! evolution live in [`dynamics`] as explicit (re, im) pairs. Everything is
//! generic over the scalar via [`Real`]; the `*64` aliases below fix f64,
//! which is what the tolerances throughout the crate are calibrated for.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub mod dynamics;
pub mod hierarchy;
pub mod matfun;
pub mod qcqp;
pub mod rng;
pub mod states;
pub mod superop;

/// Scalar field for all matrix work: IEEE float with f64 conversions.
///
/// Implemented for `f32` and `f64` via the blanket impl. The crate's
/// tolerance defaults assume f64; f32 works but needs looser tolerances.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for pulling an f64 literal into the scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal must convert into the scalar type")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
}

/// Everything that can go wrong across the crate.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },
    #[error("degenerate Gram matrix: {context}")]
    DegenerateGram { context: String },
    #[error("rank {rank} out of range 1..={dim}")]
    BadRank { rank: usize, dim: usize },
    #[error("shape mismatch: {context}")]
    BadShape { context: String },
    #[error("invalid channel spec: {context}")]
    BadSpec { context: String },
    #[error("invalid density matrix: {context}")]
    BadDensity { context: String },
    #[error("record is not a pure state (second eigenvalue {second_eig:e})")]
    NotPure { second_eig: f64 },
    #[error("hierarchy level unusable: {context}")]
    BadLevel { context: String },
    #[error("all mixture weights are zero")]
    ZeroWeights,
    #[error("normal equations are singular beyond tolerance")]
    SingularSystem,
    #[error("solver did not converge: {context}")]
    NotConverged { context: String },
    #[error("invalid configuration: {context}")]
    BadConfig { context: String },
    #[error("exponent overflow in dissipative evolution (exponent {exponent:e})")]
    Overflow { exponent: f64 },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON failure on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub type SymMatrix64 = matfun::SymMatrix<f64>;
pub type RectMatrix64 = matfun::RectMatrix<f64>;
pub type Spectrum64 = matfun::Spectrum<f64>;
pub type DensityMatrix64 = states::DensityMatrix<f64>;
pub type MappingOperator64 = states::MappingOperator<f64>;
pub type MixedUnitaryChannel64 = states::MixedUnitaryChannel<f64>;
pub type MappingRecord64 = states::MappingRecord<f64>;
pub type MappingDataset64 = states::MappingDataset<f64>;
pub type Superoperator64 = superop::Superoperator<f64>;
pub type Solution64 = qcqp::Solution<f64>;
pub type Hierarchy64 = hierarchy::Hierarchy<f64>;
