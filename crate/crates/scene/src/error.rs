use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene seed {seed}: no valid placement after {attempts} attempts")]
    Rejection { seed: u64, attempts: usize },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"SFDS\"")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("unexpected end of file at byte {offset}")]
    UnexpectedEof { offset: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}
