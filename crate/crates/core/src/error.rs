use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("branching factor {0} at level {1} is below 2")]
    InvalidBranching(usize, usize),
    #[error("negative mass {0} on leaf {1}")]
    NegativeMass(f64, usize),
    #[error("leaf masses sum to {0}, expected 1")]
    MassSum(f64),
    #[error("expected {expected} leaf values, got {got}")]
    LeafCount { expected: usize, got: usize },
    #[error("level {level} out of range for depth {depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("cell {index} out of range at level {level}")]
    CellOutOfRange { level: usize, index: usize },
    #[error("zero-mass cell at level {level}, index {index}")]
    ZeroMass { level: usize, index: usize },
    #[error("cell at level {level}, index {index} has {children} children, expected 2")]
    NonBinary {
        level: usize,
        index: usize,
        children: usize,
    },
    #[error("operands live on different filtration trees")]
    TreeMismatch,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("invalid exponent {0}")]
    InvalidExponent(f64),
    #[error("negative argument for the exponential class")]
    NegativeArgument,
    #[error("Luxemburg norm did not converge below the bracket limit")]
    Overflow,
    #[error("martingale has nonzero initial value (max |f_0| = {0})")]
    NonZeroInitial(f64),
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("transform symbol exceeds 1 in sup norm ({0})")]
    SymbolBound(f64),
    #[error("not a martingale: level {level} deviates by {deviation}")]
    NotMartingale { level: usize, deviation: f64 },
    #[error("invalid atom: {0}")]
    InvalidAtom(String),
    #[error("b is constant; the commutator endpoint suites need a non-constant symbol")]
    ConstantSymbol,
    #[error("tree has {0} leaves, above the configured limit {1}")]
    TooLarge(usize, usize),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
