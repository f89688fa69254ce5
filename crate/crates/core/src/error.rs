use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("density value {value} outside [1/lambda, lambda] with lambda = {lambda}")]
    DensityOutOfBounds { value: f64, lambda: f64 },
    #[error("unequal masses: {0} vs {1}")]
    UnequalMasses(f64, f64),
    #[error("negative density value {0}")]
    NegativeDensity(f64),
    #[error("empty partition")]
    EmptyPartition,
    #[error("partition depth {0} exceeds cap of 40")]
    DepthCap(u32),
    #[error("aspect ratio {ratio} exceeds the bound {bound}")]
    AspectRatio { ratio: f64, bound: f64 },
    #[error("root finder failed to bracket: {0}")]
    RootFinder(String),
    #[error("domain is disconnected; components: {0:?}")]
    Disconnected(Vec<Vec<usize>>),
    #[error("degenerate facet between boxes {0} and {1}")]
    DegenerateFacet(usize, usize),
    #[error("diagnostic mesh cap: 2^{0} exceeds the allowed mesh")]
    MeshCap(u32),
    #[error("not enough points for a rate fit: need at least 3, got {0}")]
    TooFewPoints(usize),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
