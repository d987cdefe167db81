//! Command implementations behind the `pseudoneg` binary.
//!
//! Every command writes a resolved config snapshot next to its outputs, and
//! every CSV opens with `#` lines naming the tool version and the digest of
//! that snapshot, so a result file can always be traced to the exact
//! settings that produced it.

pub mod commands;
pub mod experiment;

use std::path::PathBuf;

use thiserror::Error;

pub use experiment::ExperimentConfig;

/// Environment variable naming the output directory when `--out` is absent.
pub const OUT_ENV: &str = "PSEUDONEG_OUT";
/// Output directory when neither `--out` nor the environment names one.
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pseudoneg::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{source} (last good checkpoint written to {})", checkpoint.display())]
    Diverged {
        source: pseudoneg::Error,
        checkpoint: PathBuf,
    },
    #[error("collapse audit failed")]
    AuditFailed,
}

/// `--out`, else the environment override, else [`DEFAULT_OUT`].
pub fn resolve_out(flag: Option<PathBuf>, env: Option<String>) -> PathBuf {
    flag.or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_precedence() {
        assert_eq!(resolve_out(Some("a".into()), Some("b".into())), PathBuf::from("a"));
        assert_eq!(resolve_out(None, Some("b".into())), PathBuf::from("b"));
        assert_eq!(resolve_out(None, Some(String::new())), PathBuf::from(DEFAULT_OUT));
        assert_eq!(resolve_out(None, None), PathBuf::from(DEFAULT_OUT));
    }
}
