//! Error taxonomy shared by every module in the crate.

use std::fmt;

/// Crate-wide error type. Variants map onto process exit codes in the CLI:
/// `Numeric` exits 3, `Io` exits 4, everything else exits 2.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape disagreement (rank, dimension, or element-count mismatch).
    Shape { context: &'static str, detail: String },
    /// A parameter violated its documented range or precondition.
    Param { context: &'static str, detail: String },
    /// A caller broke an API contract (wrong call order, cross-tape operands,
    /// untrained model where a trained one is required, ...).
    Contract { context: &'static str, detail: String },
    /// Stateful object used past its lifecycle (e.g. a tape consumed twice).
    State { context: &'static str, detail: String },
    /// Non-finite value where a finite one is required (diverging optimization).
    Numeric { context: &'static str, detail: String },
    /// Malformed serialized artifact (bad magic, version, or truncation).
    Format { context: &'static str, detail: String },
    /// A patch or mask does not fit inside the target image.
    Placement { context: &'static str, detail: String },
    /// Operating-system level I/O failure.
    Io { path: String, detail: String },
}

impl Error {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape { context, detail: detail.into() }
    }
    pub fn param(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Param { context, detail: detail.into() }
    }
    pub fn contract(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Contract { context, detail: detail.into() }
    }
    pub fn state(context: &'static str, detail: impl Into<String>) -> Error {
        Error::State { context, detail: detail.into() }
    }
    pub fn numeric(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Numeric { context, detail: detail.into() }
    }
    pub fn format(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Format { context, detail: detail.into() }
    }
    pub fn placement(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Placement { context, detail: detail.into() }
    }
    pub fn io(path: impl Into<String>, err: &std::io::Error) -> Error {
        Error::Io { path: path.into(), detail: err.to_string() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, detail } => write!(f, "shape error in {context}: {detail}"),
            Error::Param { context, detail } => write!(f, "invalid parameter in {context}: {detail}"),
            Error::Contract { context, detail } => write!(f, "contract violation in {context}: {detail}"),
            Error::State { context, detail } => write!(f, "state error in {context}: {detail}"),
            Error::Numeric { context, detail } => write!(f, "numeric error in {context}: {detail}"),
            Error::Format { context, detail } => write!(f, "format error in {context}: {detail}"),
            Error::Placement { context, detail } => write!(f, "placement error in {context}: {detail}"),
            Error::Io { path, detail } => write!(f, "i/o error on {path}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_includes_context_and_detail() {
        let e = Error::shape("conv2d", "expected 4 dims, got 3");
        let s = e.to_string();
        assert!(s.contains("conv2d"));
        assert!(s.contains("got 3"));
    }

    #[test]
    fn io_preserves_path() {
        let ioe = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let e = Error::io("/tmp/x.atsr", &ioe);
        assert!(e.to_string().contains("/tmp/x.atsr"));
    }
}
