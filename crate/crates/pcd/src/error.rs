use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic: expected \"PCD1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: needed {needed} bytes for {what} at offset {offset}, {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("duplicate entry path `{0}`")]
    DuplicatePath(String),

    #[error("entry `{path}` has unsupported dtype code {code} (only 0 = f32 is defined)")]
    BadDtype { path: String, code: u8 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),

    #[error("metadata: {0}")]
    Metadata(#[source] serde_json::Error),

    #[error("config `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0} verification check(s) failed")]
    VerifyFailed(usize),

    #[error(transparent)]
    Core(#[from] pcd_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
