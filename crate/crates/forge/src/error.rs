use std::io;
use std::path::{Path, PathBuf};

use zigan_core::Error as CoreError;

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<ForgeError>,
    },
    #[error("font has no glyph for {0}")]
    MissingGlyph(String),
    #[error("cannot parse font file {0}")]
    BadFontFile(PathBuf),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl ForgeError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        ForgeError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        ForgeError::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &ForgeError {
        match self {
            ForgeError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit status: 2 config, 3 data, 4 numeric failure, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            ForgeError::Config(_) => 2,
            ForgeError::Core(e) => match e {
                CoreError::InvalidConfig(_) | CoreError::BadResolution(_) => 2,
                CoreError::NonFiniteLoss { .. } | CoreError::NonPsd(_) => 4,
                _ => 3,
            },
            ForgeError::MissingGlyph(_) | ForgeError::BadFontFile(_) | ForgeError::Data(_) => 3,
            ForgeError::CorruptCheckpoint(_) | ForgeError::Io { .. } | ForgeError::Image { .. } => 5,
            ForgeError::Context { .. } => unreachable!(),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<ForgeError>> ResultExt<T> for std::result::Result<T, E> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.into().context(ctx()))
    }
}
