use thiserror::Error;

/// Library-wide error type.
///
/// Geometry constructors validate their inputs and return
/// `DegenerateInput` / `NonSimple` instead of building broken objects;
/// iterative constructions that exhaust their retry budget report
/// `ConstructionFailed` with enough context to reproduce.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("polygon is not simple: {0}")]
    NonSimple(String),

    #[error("parameter out of domain: {0}")]
    OutOfDomain(String),

    #[error("invariant violated: {0}")]
    InvariantViolated(String),

    #[error("construction failed: {0}")]
    ConstructionFailed(String),

    #[error("map evaluation undefined at ({x}, {y})")]
    UndefinedAt { x: f64, y: f64 },

    #[error("bad configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
