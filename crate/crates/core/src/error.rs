use std::fmt;

use thiserror::Error;

/// A single problem with a [`Potentials`](crate::Potentials) instance or its grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyGrid { height: usize, width: usize },
    NoLabels,
    ZeroStride,
    StrideExceedsExtent { stride: usize, extent: usize },
    StridesNotSortedUnique,
    UnaryLength { expected: usize, found: usize },
    PairwiseLength { expected: usize, found: usize },
    NonFiniteUnary { vertex: usize, label: usize },
    NonFinitePairwise { table: usize, from: usize, to: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyGrid { height, width } => {
                write!(f, "grid must be at least 1x1, got {height}x{width}")
            }
            Violation::NoLabels => write!(f, "label count must be at least 1"),
            Violation::ZeroStride => write!(f, "strides must be positive"),
            Violation::StrideExceedsExtent { stride, extent } => {
                write!(f, "stride exceeds grid extent: stride {stride} >= {extent}")
            }
            Violation::StridesNotSortedUnique => {
                write!(f, "strides must be unique and sorted ascending")
            }
            Violation::UnaryLength { expected, found } => {
                write!(f, "unary: expected {expected} entries, found {found}")
            }
            Violation::PairwiseLength { expected, found } => {
                write!(f, "pairwise: expected {expected} entries, found {found}")
            }
            Violation::NonFiniteUnary { vertex, label } => {
                write!(f, "unary[{vertex}][{label}] is not finite")
            }
            Violation::NonFinitePairwise { table, from, to } => {
                write!(f, "pairwise[{table}][{from}][{to}] is not finite")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("labeling has {found} entries, grid has {expected} vertices")]
    LabelingLength { expected: usize, found: usize },
    #[error("label {label} at vertex {vertex} is outside [0, {num_labels})")]
    LabelOutOfRange {
        vertex: usize,
        label: usize,
        num_labels: usize,
    },
    #[error("gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("max_iters must be at least 1")]
    ZeroIterations,
    #[error("instance too large to enumerate: {states} states exceeds the limit of {limit}")]
    TooLarge { states: f64, limit: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
