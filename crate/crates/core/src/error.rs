use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no foreground voxels in any subject; intensity percentiles undefined")]
    NoForeground,
    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),
    #[error("resampling factor {factor:.1} exceeds limit; header spacing is likely corrupt")]
    ExcessiveResampling { factor: f64 },
    #[error("quality band [{lo}, {hi}) unreachable after {retries} trials (best dsc {best:.4})")]
    BandUnreachable {
        lo: f64,
        hi: f64,
        retries: usize,
        best: f64,
    },
    #[error("zero variance input; correlation undefined")]
    ZeroVariance,
}
