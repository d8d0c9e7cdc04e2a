use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("map is {height}x{width}, need at least {min_height}x{min_width}")]
    TooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },
    #[error("grid dimensions must be at least 1x1 and match the data length")]
    BadDimensions,
    #[error("mask has no valid pixels")]
    EmptyMask,
    #[error("need at least {need} valid pixels, got {got}")]
    TooFewPixels { need: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("`{field}` = {value} is outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("coarse component `{0}` is missing but its loss weight is nonzero")]
    MissingComponent(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("optimization aborted at iteration {iteration}: non-finite {what}")]
    Aborted {
        iteration: usize,
        what: &'static str,
        trace: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn check_range(field: &'static str, value: f64, min: f64, max: f64) -> Result<()> {
        if value.is_finite() && value >= min && value <= max {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                field,
                value,
                min,
                max,
            })
        }
    }
}
