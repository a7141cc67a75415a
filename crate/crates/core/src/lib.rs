//! Differentiable dual-decomposition MAP inference on pairwise grid CRFs.
//!
//! A grid instance ([`Potentials`]) is split into horizontal and vertical
//! chains ([`Decomposition`]). The solver runs monotone fixed-point updates on
//! per-chain copies of the unary scores, using exact dynamic programming on each
//! chain with either a hard max or a log-sum-exp smoothed max, and decodes a
//! labeling together with a duality-gap certificate. The [`autodiff`] module
//! unrolls a fixed number of updates and returns exact gradients of a loss on
//! the decoded marginals w.r.t. the potentials; [`oracle`] provides brute-force
//! references.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the default `f64`.

pub mod autodiff;
pub mod bench;
pub mod chain_dp;
pub mod error;
pub mod generate;
pub mod io;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod scalar;
pub mod solver;

pub use chain_dp::{chain_backward, chain_forward, smoothed_max, ChainSlice, Mode};
pub use error::{Error, Result, Violation};
pub use model::{
    build_decomposition, energy, replicate_unaries, validate_potentials, Chain, Decomposition,
    GridSpec, Labeling, Pairwise, Potentials,
};
pub use scalar::{Scalar, ScalarWidth};
pub use solver::{solve, DualState, Problem, SolveConfig, SolveResult};

pub type PotentialsF64 = Potentials<f64>;
pub type PotentialsF32 = Potentials<f32>;
pub type ProblemF64 = Problem<f64>;
pub type ProblemF32 = Problem<f32>;
pub type ModeF64 = Mode<f64>;
pub type SolveConfigF64 = SolveConfig<f64>;
pub type SolveConfigF32 = SolveConfig<f32>;
pub type SolveResultF64 = SolveResult<f64>;
pub type SolveResultF32 = SolveResult<f32>;
