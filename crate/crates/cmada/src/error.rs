use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] cmada_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {} (written by `{stage}`); run that stage first", path.display())]
    MissingArtifact { stage: String, path: PathBuf },
    #[error(
        "{} was produced under config hash {found} but the current config hashes to {expected}; \
         rerun the stage or pass --allow-hash-mismatch",
        path.display()
    )]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("output directory is locked ({}); another stage is running or a crashed run left the lock behind", .0.display())]
    Locked(PathBuf),
    #[error("stage `{stage}` is not part of the {variant} plan")]
    NotInPlan { stage: String, variant: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}
